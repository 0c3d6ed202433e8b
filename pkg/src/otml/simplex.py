"""Exact discrete optimal transport by the transportation simplex method.

Northwest-corner start, MODI (u-v) potentials for reduced costs and Bland's
smallest-index rule for both the entering and the leaving cell, which rules
out cycling on degenerate bases.
"""

from collections import deque

import numpy as np

from .exceptions import ContractError, DimensionError
from .tensor import Tensor
from .transport import TransportPlan, check_marginal, marginal_error

MAX_DIM = 16
_ZERO = 1e-12


def _northwest_corner(supply, demand):
    m, n = len(supply), len(demand)
    supply, demand = supply.copy(), demand.copy()
    flow = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        q = min(supply[i], demand[j])
        flow[i, j] = q
        basis.append((i, j))
        supply[i] -= q
        demand[j] -= q
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif supply[i] <= demand[j]:
            i += 1
        else:
            j += 1
    return flow, basis


def _potentials(cost, basis, m, n):
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    by_row = [[] for _ in range(m)]
    by_col = [[] for _ in range(n)]
    for i, j in basis:
        by_row[i].append(j)
        by_col[j].append(i)
    queue = deque([("r", 0)])
    while queue:
        kind, k = queue.popleft()
        if kind == "r":
            for j in by_row[k]:
                if np.isnan(v[j]):
                    v[j] = cost[k, j] - u[k]
                    queue.append(("c", j))
        else:
            for i in by_col[k]:
                if np.isnan(u[i]):
                    u[i] = cost[i, k] - v[k]
                    queue.append(("r", i))
    return u, v


def _cycle(basis, m, n, enter):
    """Cells of the unique cycle closed by ``enter``, starting with ``enter``."""
    i0, j0 = enter
    # bipartite tree: rows are nodes 0..m-1, columns m..m+n-1
    adjacency = [[] for _ in range(m + n)]
    for i, j in basis:
        adjacency[i].append(m + j)
        adjacency[m + j].append(i)
    start, goal = m + j0, i0
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt in adjacency[node]:
            if nxt not in parent:
                parent[nxt] = node
                queue.append(nxt)
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    # path runs row i0 -> ... -> column j0; walk it backwards from column j0
    path.reverse()
    cells = [enter]
    for a, b in zip(path, path[1:]):
        row, col = (a, b - m) if a < m else (b, a - m)
        cells.append((row, col))
    return cells


def exact_ot_oracle(cost, mu, nu, max_pivots=10000):
    """Exact minimum of ``<T, M>`` over plans with marginals ``mu`` and ``nu``.

    Parameters
    ----------
    cost : array-like or Tensor, shape (m, n)
    mu, nu : array-like or Tensor
        Strictly positive probability vectors of length ``m`` and ``n``.

    Returns
    -------
    TransportPlan
        ``iterations`` counts simplex pivots.
    """
    cost = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=float)
    mu = np.asarray(mu.data if isinstance(mu, Tensor) else mu, dtype=float)
    nu = np.asarray(nu.data if isinstance(nu, Tensor) else nu, dtype=float)
    if cost.ndim != 2 or cost.shape != (len(mu), len(nu)):
        raise DimensionError(f"cost {cost.shape} does not match marginals ({len(mu)}, {len(nu)})")
    m, n = cost.shape
    if max(m, n) > MAX_DIM:
        raise DimensionError(f"exact oracle is limited to {MAX_DIM}x{MAX_DIM} problems")
    check_marginal(mu, "mu")
    check_marginal(nu, "nu")

    flow, basis = _northwest_corner(mu, nu)
    pivots = 0
    while True:
        u, v = _potentials(cost, basis, m, n)
        reduced = cost - u[:, None] - v[None, :]
        in_basis = set(basis)
        enter = None
        for i in range(m):
            for j in range(n):
                if (i, j) not in in_basis and reduced[i, j] < -_ZERO:
                    enter = (i, j)
                    break
            if enter is not None:
                break
        if enter is None:
            break
        if pivots >= max_pivots:
            raise ContractError(f"transportation simplex exceeded {max_pivots} pivots")
        cells = _cycle(basis, m, n, enter)
        donors = cells[1::2]
        theta = min(flow[c] for c in donors)
        leave = min(c for c in donors if flow[c] <= theta + _ZERO)
        for c in cells[0::2]:
            flow[c] += theta
        for c in donors:
            flow[c] -= theta
        flow[leave] = 0.0
        basis.remove(leave)
        basis.append(enter)
        pivots += 1

    flow = np.maximum(flow, 0.0)
    return TransportPlan(
        plan=Tensor(flow),
        cost=float(np.sum(flow * cost)),
        iterations=pivots,
        marginal_error=marginal_error(flow, mu, nu),
        tol=0.0,
    )
