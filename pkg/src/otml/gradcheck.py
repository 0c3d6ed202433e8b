"""Finite-difference verification of every differentiable operation.

Each case maps a few random inputs through a function, contracts the
output with a fixed random weight tensor ``W`` and compares the reverse-mode
gradient of ``sum(out * W)`` against central differences on a seeded sample
of input entries. The relative error of one entry is
``|a - n| / max(|a|, |n|, floor)``.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .cvsim import CvSimParams, cross_attend
from .model import EncoderConfig, ExpanderConfig, LossWeights, OptimlModel, OTConfig
from .nnops import batchnorm1d, conv2d
from .regularizers import covariance_term, variance_term
from .transport import TransportProblem, build_cost, build_discrepancy, sinkhorn, sinkhorn_update

OP_THRESHOLD = 1e-4
END_TO_END_THRESHOLD = 1e-3
STEP = 1e-6
FLOOR = 1e-3


@dataclass
class CaseResult:
    name: str
    kind: str
    max_rel_error: float
    threshold: float
    checked: int

    @property
    def passed(self):
        return self.max_rel_error <= self.threshold

    def line(self):
        status = "ok" if self.passed else "FAIL"
        return f"{self.kind:<9} {self.name:<22} max_rel_err={self.max_rel_error:.3e} threshold={self.threshold:.0e} {status}"


def relative_error(analytic, numeric, floor=FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _contract(out, weight):
    """``sum(out * weight)`` as a private node, so corrupting a registered op never touches the harness."""
    return tn._make(np.sum(out.data * weight), (out,), lambda g: (g * weight,), "gradcheck.contract")


def _sample(size, count, rng):
    return np.arange(size) if size <= count else np.sort(rng.choice(size, count, replace=False))


def check_function(fn, inputs, rng, max_entries=12, step=STEP):
    """Largest relative error of ``fn``'s gradient over sampled input entries.

    ``fn`` maps a list of Tensors to a Tensor; ``inputs`` is a list of arrays.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tn.reset_graph()
    leaves = [tn.Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    weight = rng.standard_normal(out.shape)
    tn.backward(_contract(out, weight))
    tn.reset_graph()

    def value(arrays):
        with tn.no_grad():
            return float(np.sum(fn(*[tn.Tensor(a) for a in arrays]).data * weight))

    worst, checked = 0.0, 0
    for k, x in enumerate(inputs):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(x)
        for flat in _sample(x.size, max_entries, rng):
            idx = np.unravel_index(flat, x.shape)
            arrays = [a.copy() for a in inputs]
            arrays[k][idx] += step
            plus = value(arrays)
            arrays[k][idx] -= 2 * step
            minus = value(arrays)
            numeric = (plus - minus) / (2 * step)
            worst = max(worst, relative_error(analytic[idx], numeric))
            checked += 1
    return worst, checked


def _away(rng, shape, kinks, margin=0.05, low=-2.0, high=2.0):
    """Uniform samples kept at least ``margin`` away from each kink."""
    x = rng.uniform(low, high, shape)
    for kink in kinks:
        close = np.abs(x - kink) < margin
        x[close] = kink + np.where(x[close] >= kink, margin, -margin) * 2
    return x


def _simplex(rng, shape):
    x = rng.uniform(0.5, 1.5, shape)
    return x / x.sum(axis=-1, keepdims=True)


def op_cases(rng):
    """``{registered op name: (fn, inputs)}`` covering every registered op."""
    def u(*shape):
        return rng.uniform(-2, 2, shape)

    def pos(*shape):
        return rng.uniform(0.5, 2.0, shape)

    cost = rng.uniform(0, 2, (2, 4, 4))
    return {
        "add": (lambda a, b: a + b, [u(3, 4), u(4)]),
        "sub": (lambda a, b: a - b, [u(3, 4), u(3, 1)]),
        "mul": (lambda a, b: a * b, [u(3, 4), u(1, 4)]),
        "div": (lambda a, b: a / b, [u(3, 4), pos(3, 4) * rng.choice([-1, 1], (3, 4))]),
        "neg": (lambda a: -a, [u(3, 4)]),
        "exp": (tn.exp, [u(3, 4)]),
        "log": (tn.log, [pos(3, 4)]),
        "sqrt": (tn.sqrt, [pos(3, 4)]),
        "relu": (tn.relu, [_away(rng, (3, 4), [0.0])]),
        "max_with_scalar": (lambda a: tn.max_with_scalar(a, 0.3), [_away(rng, (3, 4), [0.3])]),
        "clip": (lambda a: tn.clip(a, -0.5, 0.5), [_away(rng, (3, 4), [-0.5, 0.5])]),
        "sum": (lambda a: tn.sum_(a, axis=1), [u(3, 4)]),
        "mean": (lambda a: tn.mean(a, axis=0, keepdims=True), [u(3, 4)]),
        "variance_along_axis": (lambda a: tn.variance_along_axis(a, axis=0), [u(5, 3)]),
        "l2_norm_along_axis": (lambda a: tn.l2_norm_along_axis(a, axis=-1), [u(3, 4)]),
        "softmax": (lambda a: tn.softmax(a, axis=-1), [u(3, 4)]),
        "logsumexp": (lambda a: tn.logsumexp(a, axis=0), [u(3, 4)]),
        "matmul": (lambda a, b: a @ b, [u(2, 3, 4), u(2, 4, 5)]),
        "transpose": (lambda a: tn.transpose(a, (1, 0, 2)), [u(2, 3, 4)]),
        "reshape": (lambda a: tn.reshape(a, (2, 6)), [u(3, 4)]),
        "concat": (lambda a, b: tn.concat([a, b], axis=0), [u(2, 3), u(1, 3)]),
        "slice": (lambda a: a[0:2, ::2] + a[[0, 2]][:, 1:3], [u(3, 4)]),
        "conv2d": (lambda x, k, b: conv2d(x, k, b, stride=2, padding=1), [u(2, 2, 5, 5), u(3, 2, 3, 3), u(3)]),
        "batchnorm1d": (lambda x, g, b: batchnorm1d(x, g, b), [u(6, 4), pos(4), u(4)]),
        "sinkhorn_update": (
            lambda o, c, m: sinkhorn_update(o, c, m, 0.5, axis=-1, kernel=np.exp(-c.data / 0.5))
            + sinkhorn_update(o, c, m, 0.5, axis=-2),
            [u(2, 4), cost, np.log(_simplex(rng, (2, 4)))],
        ),
    }


def _unrolled_plan(cost, logits_mu, logits_nu):
    problem = TransportProblem(cost, tn.softmax(logits_mu), tn.softmax(logits_nu), 0.1)
    return sinkhorn(problem, max_iters=30, mode="unrolled").plan


def _cross_attend(g_s, g_t, wq, wk, wv):
    return cross_attend(g_s, g_t, CvSimParams(wq, wk, wv, n_heads=2, n_tokens=4))


def composite_cases(rng):
    def u(*shape):
        return rng.uniform(-2, 2, shape)

    spread = np.where(rng.random(5) < 0.5, 0.4, 2.5)
    return {
        "cosine_cost": (lambda s, t: build_cost(build_discrepancy(s, t)), [u(2, 4, 6), u(2, 4, 6)]),
        "sinkhorn_unrolled": (_unrolled_plan, [rng.uniform(0, 2, (2, 4, 4)), u(2, 4), u(2, 4)]),
        "cross_attend": (_cross_attend, [u(3, 8), u(3, 8), u(8, 8), u(8, 8), u(8, 8)]),
        "variance_term": (lambda q: variance_term(q), [rng.standard_normal((6, 5)) * spread]),
        "covariance_term": (covariance_term, [u(6, 5)]),
    }


def tiny_model(seed=0):
    """Smallest configuration of the full network: 8x8 inputs, d=8, 4 tokens."""
    return OptimlModel(
        encoder=EncoderConfig(blocks=((4, 3, 2), (8, 3, 2)), image_size=(8, 8)),
        expander=ExpanderConfig(widths=(16, 16)),
        n_tokens=4,
        n_heads=2,
        seed=seed,
    )


def check_end_to_end(rng, entries_per_param=3, step=STEP):
    """Gradient of the composite objective w.r.t. every parameter group of the tiny model."""
    model = tiny_model(int(rng.integers(2**31)))
    view_s = rng.uniform(0, 1, (2, 1, 8, 8))
    view_t = rng.uniform(0, 1, (2, 1, 8, 8))
    weights, ot = LossWeights(), OTConfig(epsilon=0.1, iterations=30)

    tn.reset_graph()
    for p in model.params.values():
        p.grad = None
    _, total = model.forward_loss(view_s, view_t, weights, ot)
    tn.backward(total)
    tn.reset_graph()
    analytic = {name: p.grad.copy() for name, p in model.params.items()}

    def value():
        with tn.no_grad():
            return model.forward_loss(view_s, view_t, weights, ot)[0].total

    worst, checked = 0.0, 0
    for name, param in model.params.items():
        for flat in _sample(param.size, entries_per_param, rng):
            idx = np.unravel_index(flat, param.shape)
            original = param.data[idx]
            param.data[idx] = original + step
            plus = value()
            param.data[idx] = original - step
            minus = value()
            param.data[idx] = original
            worst = max(worst, relative_error(analytic[name][idx], (plus - minus) / (2 * step)))
            checked += 1
    return worst, checked


def run_gradcheck(seed=0, corrupt=()):
    """Run every case; ``corrupt`` names ops whose adjoints are deliberately skewed.

    Returns
    -------
    list of CaseResult
        One ``op`` entry per registered operation, then the composites and
        the end-to-end objective.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    results = []
    with tn.corrupted_adjoint(*corrupt):
        cases = op_cases(rng)
        missing = set(tn.REGISTRY) - set(cases)
        if missing:
            raise RuntimeError(f"no gradient case for ops {sorted(missing)}")
        for name in sorted(tn.REGISTRY):
            fn, inputs = cases[name]
            err, count = check_function(fn, inputs, rng)
            results.append(CaseResult(name, "op", err, OP_THRESHOLD, count))
        for name, (fn, inputs) in composite_cases(rng).items():
            err, count = check_function(fn, inputs, rng)
            results.append(CaseResult(name, "composite", err, OP_THRESHOLD, count))
        err, count = check_end_to_end(rng)
        results.append(CaseResult("objective", "end2end", err, END_TO_END_THRESHOLD, count))
    return results
