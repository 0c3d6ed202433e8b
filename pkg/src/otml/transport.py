"""Cosine cost construction and entropic optimal transport.

Feature maps are ``(d, hw)`` blocks (or ``(n, d, hw)`` batches). The
discrepancy between two maps is the cosine similarity between their channel
rows, the transport cost is ``1 - cosine`` and the transport plan is found
by Sinkhorn iterations on log-domain dual potentials.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .exceptions import ContractError, ConvergenceError, DegenerateFeatureError, DimensionError
from .tensor import Tensor, as_tensor

MIN_CHANNEL_NORM = 1e-12
MARGINAL_ATOL = 1e-9
DETACHED_RELAXATION = 1.9


@dataclass
class TransportProblem:
    """Cost matrix with source/target marginals and entropic strength.

    ``cost`` is ``(d, d)`` or ``(n, d, d)``; ``mu`` and ``nu`` have the
    matching ``(d,)`` or ``(n, d)`` shape.
    """

    cost: Tensor
    mu: Tensor
    nu: Tensor
    epsilon: float = 0.05

    def __post_init__(self):
        self.cost = as_tensor(self.cost)
        self.mu = as_tensor(self.mu)
        self.nu = as_tensor(self.nu)
        if self.epsilon <= 0:
            raise ContractError("epsilon must be positive")
        m = self.cost.shape
        if len(m) < 2 or self.mu.shape != m[:-1] or self.nu.shape != m[:-2] + m[-1:]:
            raise DimensionError(f"cost {m} does not match marginals {self.mu.shape}, {self.nu.shape}")
        check_marginal(self.mu.data, "mu")
        check_marginal(self.nu.data, "nu")


@dataclass
class TransportPlan:
    plan: Tensor
    cost: float
    iterations: int
    marginal_error: float
    tol: float = 0.0


def check_marginal(weights, name="marginal"):
    """Raise :class:`ContractError` unless every row is a strictly positive probability vector."""
    weights = np.asarray(weights, dtype=float)
    if np.any(weights <= 0):
        raise ContractError(f"{name} must be strictly positive")
    if np.any(np.abs(weights.sum(axis=-1) - 1.0) > MARGINAL_ATOL):
        raise ContractError(f"{name} must sum to 1")


def marginal_error(plan, mu, nu):
    """L1 violation of both marginal constraints (max over a batch)."""
    plan, mu, nu = np.asarray(plan), np.asarray(mu), np.asarray(nu)
    rows = np.abs(plan.sum(axis=-1) - mu).sum(axis=-1)
    cols = np.abs(plan.sum(axis=-2) - nu).sum(axis=-1)
    return float(np.max(rows + cols))


def build_discrepancy(z_s, z_t):
    """Cosine similarity between every channel row of ``z_s`` and of ``z_t``.

    Returns a ``(d, d)`` (or batched) tensor with entries in ``[-1, 1]``.
    Raises :class:`DegenerateFeatureError` on zero-norm channel rows.
    """
    z_s, z_t = as_tensor(z_s), as_tensor(z_t)
    if z_s.shape != z_t.shape or z_s.ndim < 2:
        raise DimensionError(f"feature maps must share a (d, hw) shape, got {z_s.shape} and {z_t.shape}")
    if z_s.shape[-2] < 2:
        raise DimensionError("feature maps need at least two channels")
    norm_s = tn.l2_norm_along_axis(z_s, axis=-1, keepdims=True)
    norm_t = tn.l2_norm_along_axis(z_t, axis=-1, keepdims=True)
    if np.any(norm_s.data < MIN_CHANNEL_NORM) or np.any(norm_t.data < MIN_CHANNEL_NORM):
        raise DegenerateFeatureError("a channel row has zero norm; cosine similarity undefined")
    unit_s = z_s / norm_s
    unit_t = z_t / norm_t
    # rounding can push |cos| one ulp past 1; the true adjoint there is zero anyway
    return tn.clip(unit_s @ tn.transpose(unit_t), -1.0, 1.0)


def build_cost(similarity):
    """Transport cost ``1 - C`` for a cosine matrix ``C``."""
    similarity = as_tensor(similarity)
    if np.any(np.abs(similarity.data) > 1.0 + 1e-9):
        raise ContractError("similarity entries must lie in [-1, 1]")
    return 1.0 - similarity


def ot_loss(plan, cost):
    """Frobenius inner product ``<T, M>``; batched inputs are averaged."""
    matrix = plan.plan if isinstance(plan, TransportPlan) else as_tensor(plan)
    cost = as_tensor(cost)
    if matrix.shape != cost.shape:
        raise DimensionError(f"plan {matrix.shape} and cost {cost.shape} differ")
    per_problem = tn.sum_(matrix * cost, axis=(-2, -1))
    return tn.mean(per_problem) if per_problem.ndim else per_problem


# ---------------------------------------------------------------------------
# Sinkhorn
# ---------------------------------------------------------------------------


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _relaxed(current, exact, epsilon, omega):
    """Over-relaxed potential update, kept only where it does not lower the dual.

    Per coordinate the dual objective, relative to its maximizer ``exact``,
    is proportional to ``phi(delta) = delta - exp(delta)`` with
    ``delta = (value - exact) / epsilon``.
    """
    if omega == 1.0 or current is None:
        return exact
    offset = (current - exact) / epsilon
    relaxed_offset = (1.0 - omega) * offset
    with np.errstate(over="ignore"):
        keep = relaxed_offset - np.exp(relaxed_offset) >= offset - np.exp(offset)
    return np.where(keep, exact + relaxed_offset * epsilon, exact)


def sinkhorn_potentials(cost, log_mu, log_nu, epsilon, max_iters, tol, g=None, relaxation=1.0, check_every=10):
    """Plain-numpy log-domain Sinkhorn; returns ``(f, g, iterations, error)``.

    ``relaxation`` > 1 over-relaxes both potential updates (safeguarded per
    coordinate so the dual objective never decreases). The returned ``g``
    is always an exact column update, so the column marginals hold to
    rounding and ``error`` is the L1 row-marginal violation.
    """
    mu = np.exp(log_mu)
    if g is None:
        g = np.zeros(log_nu.shape)
    f = None
    g_exact = g
    error = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        f = _relaxed(f, epsilon * (log_mu - _lse((g[..., None, :] - cost) / epsilon, axis=-1)), epsilon, relaxation)
        g_exact = epsilon * (log_nu - _lse((f[..., :, None] - cost) / epsilon, axis=-2))
        if it % check_every == 0 or it == max_iters:
            plan = np.exp((f[..., :, None] + g_exact[..., None, :] - cost) / epsilon)
            error = float(np.max(np.abs(plan.sum(axis=-1) - mu).sum(axis=-1)))
            if error <= tol:
                break
        g = _relaxed(g, g_exact, epsilon, relaxation)
    return f, g_exact, it, error


def _epsilon_schedule(cost, epsilon):
    spread = float(np.max(cost) - np.min(cost))
    schedule = []
    current = max(spread, epsilon)
    while current > epsilon * 4:
        schedule.append(current)
        current /= 4.0
    schedule.append(epsilon)
    return schedule


def sinkhorn(problem, max_iters=None, tol=1e-6, mode="unrolled"):
    """Entropic OT plan for ``problem`` via log-domain Sinkhorn.

    Parameters
    ----------
    problem : TransportProblem
    max_iters : int, optional
        Iteration budget. Defaults to 50 in ``unrolled`` mode and 20000 in
        ``detached`` mode.
    tol : float
        L1 marginal tolerance.
    mode : {"unrolled", "detached"}
        ``unrolled`` runs exactly ``max_iters`` iterations on the
        differentiation graph, so gradients reach the cost and both
        marginals. ``detached`` solves to ``tol`` outside the graph (epsilon
        annealing with warm starts, safeguarded over-relaxation) and
        returns a constant plan.

    Raises
    ------
    ConvergenceError
        In ``detached`` mode, when the marginal error after ``max_iters``
        exceeds ``100 * tol``.
    """
    if mode == "unrolled":
        return _sinkhorn_unrolled(problem, 50 if max_iters is None else max_iters, tol)
    if mode == "detached":
        return _sinkhorn_detached(problem, 20000 if max_iters is None else max_iters, tol)
    raise ContractError(f"unknown sinkhorn mode {mode!r}")


# Largest cost/epsilon for which exp(-cost/epsilon) stays a normal float.
_KERNEL_EXPONENT_LIMIT = 600.0


@tn.differentiable("sinkhorn_update")
def sinkhorn_update(other, cost, log_marginal, epsilon, axis=-1, kernel=None):
    """One log-domain Sinkhorn half-step as a single differentiable op.

    With ``axis=-1`` this is the row update
    ``f_i = eps * (log mu_i - LSE_j((g_j - M_ij) / eps))`` where ``other`` is
    ``g``; with ``axis=-2`` the column update, reducing over rows.

    ``kernel``, when given, must equal ``exp(-cost / eps)``; the log-sum-exp
    is then evaluated as a matrix-vector product after shifting ``other`` by
    its maximum, which is exact in value and much cheaper.
    """
    other, cost, log_marginal = as_tensor(other), as_tensor(cost), as_tensor(log_marginal)
    other_axis = -2 if axis == -1 else -1
    if kernel is not None:
        shift = np.max(other.data, axis=-1, keepdims=True)
        scaled = np.exp((other.data - shift) / epsilon)
        if axis == -1:
            sums = np.matmul(kernel, scaled[..., :, None])[..., 0]
        else:
            sums = np.matmul(scaled[..., None, :], kernel)[..., 0, :]
        out = epsilon * (log_marginal.data - np.log(sums)) - shift

        def weights_of():
            spread = scaled[..., None, :] if axis == -1 else scaled[..., :, None]
            return kernel * spread / np.expand_dims(sums, axis)

    else:
        spread = other.data[..., None, :] if axis == -1 else other.data[..., :, None]
        weights = np.subtract(spread, cost.data)
        weights *= 1.0 / epsilon
        m = np.max(weights, axis=axis, keepdims=True)
        weights -= m
        np.exp(weights, out=weights)
        s = np.sum(weights, axis=axis, keepdims=True)
        weights /= s
        out = epsilon * (log_marginal.data - np.squeeze(m + np.log(s), axis=axis))

        def weights_of():
            return weights

    def backward(g):
        flow = np.expand_dims(g, axis) * weights_of()
        return (
            -flow.sum(axis=other_axis) if other.requires_grad else None,
            flow if cost.requires_grad else None,
            epsilon * g,
        )

    return tn._make(out, (other, cost, log_marginal), backward, "sinkhorn_update")


def _sinkhorn_unrolled(problem, iterations, tol):
    eps = float(problem.epsilon)
    cost = problem.cost
    log_mu = tn.log(problem.mu)
    log_nu = tn.log(problem.nu)
    g = Tensor(np.zeros(problem.nu.shape))
    f = None
    kernel = None
    if np.max(np.abs(cost.data)) / eps < _KERNEL_EXPONENT_LIMIT:
        kernel = np.exp(-cost.data / eps)
    for _ in range(max(iterations, 1)):
        f = sinkhorn_update(g, cost, log_mu, eps, axis=-1, kernel=kernel)
        g = sinkhorn_update(f, cost, log_nu, eps, axis=-2, kernel=kernel)
    log_plan = (tn.reshape(f, f.shape + (1,)) + tn.reshape(g, g.shape[:-1] + (1, g.shape[-1])) - cost) * (1.0 / eps)
    plan = tn.exp(log_plan)
    value = np.sum(plan.data * cost.data, axis=(-2, -1))
    return TransportPlan(
        plan=plan,
        cost=float(np.mean(value)),
        iterations=max(iterations, 1),
        marginal_error=marginal_error(plan.data, problem.mu.data, problem.nu.data),
        tol=tol,
    )


def _sinkhorn_detached(problem, max_iters, tol):
    eps = float(problem.epsilon)
    cost = problem.cost.data
    log_mu = np.log(problem.mu.data)
    log_nu = np.log(problem.nu.data)
    g = None
    total = 0
    for stage_eps in _epsilon_schedule(cost, eps)[:-1]:
        _, g, used, _ = sinkhorn_potentials(
            cost, log_mu, log_nu, stage_eps, 200, max(tol, 1e-3), g=g, relaxation=DETACHED_RELAXATION
        )
        total += used
    f, g, used, error = sinkhorn_potentials(
        cost, log_mu, log_nu, eps, max(max_iters - total, 1), tol, g=g, relaxation=DETACHED_RELAXATION
    )
    total += used
    matrix = np.exp((f[..., :, None] + g[..., None, :] - cost) / eps)
    result = TransportPlan(
        plan=Tensor(matrix),
        cost=float(np.mean(np.sum(matrix * cost, axis=(-2, -1)))),
        iterations=total,
        marginal_error=marginal_error(matrix, problem.mu.data, problem.nu.data),
        tol=tol,
    )
    if result.marginal_error > 100 * tol:
        raise ConvergenceError(
            f"sinkhorn stopped after {total} iterations with marginal error {result.marginal_error:.3e}",
            plan=result,
        )
    return result
