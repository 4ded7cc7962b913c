"""Single-agent demand: utility maximization under budget, linear rows and x >= 0.

Linear utilities go through an LP; smooth utilities through the barrier solver on
``log u``. Knapsack-structured agents can also be solved by the virtual-products
greedy, which is kept independent of the LP so the two can cross-check.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernels import SmoothProgram, UnboundedError, barrier_solve, lp_solve
from .market import LINEAR, Agent, evaluate_utility, log_utility_derivs

FEAS_TOL = 1e-9


@dataclass(frozen=True)
class IopSolution:
    x: np.ndarray
    objective: float
    spent: float
    budget_dual: float | None = None
    row_duals: np.ndarray | None = None
    nonneg_duals: np.ndarray | None = None   # s_j <= 0
    method: str = "lp"


def _iop_constraints(agent: Agent, p: np.ndarray):
    m = agent.m
    A, b = agent.constraints.A, agent.constraints.b
    G = np.vstack([p[None, :], A.reshape(-1, m), -np.eye(m)])
    h = np.concatenate([[agent.budget], b, np.zeros(m)])
    return G, h


def solve_iop(agent: Agent, p, *, lexicographic: bool = True) -> IopSolution:
    """Optimal bundle for ``agent`` at prices ``p``.

    Raises UnboundedError when negative or zero prices allow unlimited utility.
    """
    p = np.asarray(p, dtype=float)
    m = agent.m
    if p.shape != (m,):
        raise ValueError(f"price vector has shape {p.shape}, expected ({m},)")
    if agent.budget < 0:
        raise ValueError("budget must be nonnegative")
    if agent.utility.kind == LINEAR:
        G, h = _iop_constraints(agent, p)
        sol = lp_solve(agent.utility.coeffs, G, h, lexicographic=lexicographic)
        x = np.maximum(sol.x, 0.0)
        l = agent.constraints.count
        return IopSolution(x=x, objective=float(agent.utility.coeffs @ x), spent=float(p @ x),
                           budget_dual=float(sol.mu[0]), row_duals=sol.mu[1:1 + l],
                           nonneg_duals=-sol.mu[1 + l:], method="lp")
    return _solve_iop_smooth(agent, p)


def _solve_iop_smooth(agent: Agent, p: np.ndarray) -> IopSolution:
    m = agent.m
    if agent.budget == 0:
        x = np.zeros(m)
        return IopSolution(x=x, objective=0.0, spent=0.0, method="barrier")
    spec = agent.utility
    G, h = _iop_constraints(agent, p)

    def oracle(x):
        return log_utility_derivs(spec, x)

    sol = barrier_solve(SmoothProgram(oracle, m, G, h), tol=1e-10)
    x = np.maximum(sol.x, 0.0)
    u, _ = evaluate_utility(spec, x)
    # duals of the log-objective rescale to duals of u by u(x)
    l = agent.constraints.count
    mu = sol.mu * u
    return IopSolution(x=x, objective=u, spent=float(p @ x), budget_dual=float(mu[0]),
                       row_duals=mu[1:1 + l], nonneg_duals=-mu[1 + l:], method="barrier")


# --- virtual products -----------------------------------------------------------

@dataclass(frozen=True)
class VirtualProduct:
    u_low: float
    p_low: float
    u_high: float
    p_high: float
    knapsack: int          # -1 for an unconstrained good
    good_low: int | None   # None for the origin
    good_high: int
    unlimited: bool = False

    @property
    def theta(self) -> float:
        return (self.p_high - self.p_low) / (self.u_high - self.u_low)

    @property
    def bang_per_buck(self) -> float:
        th = self.theta
        return np.inf if th == 0 else 1.0 / th


@dataclass(frozen=True)
class Frontier:
    products: tuple[VirtualProduct, ...]
    knapsack: int = 0

    @property
    def slopes(self) -> list[float]:
        return [vp.theta for vp in self.products]


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def knapsack_frontier(goods: Sequence[int], u, p, knapsack: int = 0) -> Frontier:
    """Lower convex hull (utility on the horizontal axis, price vertical) of the
    knapsack's goods and the origin, up to the highest-utility good."""
    goods = [int(j) for j in goods]
    if not goods:
        raise ValueError("knapsack has no goods")
    if len(set(goods)) != len(goods):
        raise ValueError("knapsack goods must be distinct")
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(u[goods] < 0):
        raise ValueError("utilities must be nonnegative")
    # keep the cheapest good for each utility level; zero-utility goods never help
    best: dict[float, int] = {}
    for j in sorted(goods):
        if u[j] <= 0:
            continue
        k = best.get(u[j])
        if k is None or p[j] < p[k]:
            best[u[j]] = j
    pts = [(0.0, 0.0, None)] + sorted(((u[j], p[j], j) for j in best.values()), key=lambda t: (t[0], t[1]))
    hull: list[tuple] = []
    for pt in pts:
        while len(hull) >= 2 and _cross(hull[-2], hull[-1], pt) <= 0:
            hull.pop()
        hull.append(pt)
    products = tuple(
        VirtualProduct(a[0], a[1], b[0], b[1], knapsack, a[2], b[2])
        for a, b in zip(hull[:-1], hull[1:])
    )
    return Frontier(products, knapsack)


@dataclass(frozen=True)
class KnapsackStructure:
    blocks: tuple[tuple[int, ...], ...]
    capacity: tuple[float, ...]      # rhs / coefficient for each block
    free_goods: tuple[int, ...]


def knapsack_structure(agent: Agent) -> KnapsackStructure:
    """Interpret an agent's rows as disjoint knapsacks ``a * sum_{j in block} x_j <= b``."""
    A, b = agent.constraints.A, agent.constraints.b
    m = agent.m
    owner = -np.ones(m, dtype=int)
    blocks, caps = [], []
    for t in range(agent.constraints.count):
        row = A[t]
        nz = np.flatnonzero(row != 0)
        if nz.size == 0:
            raise ValueError(f"row {t} has no goods")
        coef = row[nz]
        if np.any(coef <= 0) or np.any(coef != coef[0]):
            raise ValueError(f"row {t} is not a knapsack row (needs equal positive coefficients)")
        if np.any(owner[nz] >= 0):
            raise ValueError(f"row {t} overlaps another knapsack")
        if b[t] < 0:
            raise ValueError(f"row {t} has a negative right-hand side")
        owner[nz] = t
        blocks.append(tuple(int(j) for j in nz))
        caps.append(float(b[t] / coef[0]))
    free = tuple(int(j) for j in np.flatnonzero(owner < 0))
    return KnapsackStructure(tuple(blocks), tuple(caps), free)


def is_knapsack_agent(agent: Agent) -> bool:
    if agent.utility.kind != LINEAR:
        return False
    try:
        knapsack_structure(agent)
    except ValueError:
        return False
    return True


def solve_iop_greedy(agent: Agent, p) -> IopSolution:
    """Virtual-products greedy for linear utilities over disjoint knapsack rows."""
    if agent.utility.kind != LINEAR:
        raise ValueError("greedy needs a linear utility")
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("greedy needs nonnegative prices; use solve_iop for negative prices")
    ks = knapsack_structure(agent)
    u = agent.utility.coeffs
    m = agent.m
    items: list[tuple] = []
    for t, (blk, cap) in enumerate(zip(ks.blocks, ks.capacity)):
        if cap == 0:
            continue
        for vp in knapsack_frontier(blk, u, p, knapsack=t).products:
            items.append((vp.theta, t, vp.good_high, vp, cap))
    n_blocks = len(ks.blocks)
    for j in ks.free_goods:
        if u[j] <= 0:
            continue
        if p[j] == 0:
            raise UnboundedError(f"good {j} is free and unconstrained")
        vp = VirtualProduct(0.0, 0.0, u[j], p[j], -1, None, j, unlimited=True)
        items.append((vp.theta, n_blocks, j, vp, np.inf))
    items.sort(key=lambda it: (it[0], it[1], it[2]))

    budget = agent.budget
    x = np.zeros(m)
    for _, t, _, vp, cap in items:
        cost = vp.p_high - vp.p_low
        if vp.unlimited:
            if budget > 0:
                x[vp.good_high] += budget / cost
                budget = 0.0
            break
        if cost <= 0:
            frac = 1.0
        elif budget <= 0:
            break
        else:
            frac = min(1.0, budget / (cost * cap))
        budget -= frac * cost * cap
        # shift ``frac`` of the knapsack from the low endpoint to the high one
        if vp.good_low is not None:
            x[vp.good_low] -= frac * cap
        x[vp.good_high] += frac * cap
        if frac < 1.0:
            budget = 0.0
            break
    x = np.maximum(x, 0.0)
    return IopSolution(x=x, objective=float(u @ x), spent=float(p @ x), method="greedy")


def solve_iop_auto(agent: Agent, p) -> IopSolution:
    p = np.asarray(p, dtype=float)
    if is_knapsack_agent(agent) and np.all(p >= 0):
        try:
            return solve_iop_greedy(agent, p)
        except UnboundedError:
            raise
    return solve_iop(agent, p)


# --- comparative statics ----------------------------------------------------------

@dataclass(frozen=True)
class DemandSweep:
    good: int
    prices: np.ndarray
    demand: np.ndarray
    giffen_intervals: tuple[tuple[float, float], ...]

    @property
    def giffen(self) -> bool:
        return bool(self.giffen_intervals)


def demand_sweep(agent: Agent, base_p, good: int, grid) -> DemandSweep:
    """Demand for ``good`` as its own price moves over ``grid`` (others fixed)."""
    base = np.asarray(base_p, dtype=float)
    grid = np.sort(np.asarray(grid, dtype=float))
    demand = np.empty(grid.size)
    for k, pj in enumerate(grid):
        p = base.copy()
        p[good] = pj
        demand[k] = solve_iop_auto(agent, p).x[good]
    flags = tuple(
        (float(grid[k]), float(grid[k + 1]))
        for k in range(grid.size - 1)
        if demand[k + 1] > demand[k] + 1e-9 and grid[k + 1] > grid[k]
    )
    return DemandSweep(good, grid, demand, flags)


class PostconditionError(AssertionError):
    pass


def compensated_demand(agent: Agent, p, p_prime, x_at_p) -> IopSolution:
    """Demand at ``p_prime`` with income reset so the old bundle stays affordable."""
    p = np.asarray(p, dtype=float)
    pp = np.asarray(p_prime, dtype=float)
    x = np.asarray(x_at_p, dtype=float)
    diff = np.flatnonzero(pp != p)
    if diff.size > 1 or (diff.size == 1 and pp[diff[0]] < p[diff[0]]):
        raise ValueError("p_prime must raise the price of at most one good")
    if agent.constraints.count:
        counts = np.sum(agent.constraints.A != 0, axis=0)
        if np.any(counts > 1):
            raise ValueError("each good may appear in at most one knapsack")
    w_new = float(pp @ x)
    sol = solve_iop_auto(agent.with_budget(w_new), pp)
    if diff.size == 1:
        j = diff[0]
        if sol.x[j] > x[j] + 1e-9:
            raise PostconditionError(f"compensated demand for good {j} rose: {sol.x[j]} > {x[j]}")
    return sol
