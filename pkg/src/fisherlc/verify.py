"""Equilibrium certification, KKT residuals and grid-based refutation evidence.

``check_equilibrium`` asks whether *some* choice of optimal bundles clears the
market at the given prices. For linear utilities an agent's optimal bundles form
a polytope, so the search is one LP over the product of those faces.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .iop import solve_iop
from .kernels import HIGHS_OPTIONS, SolverError, UnboundedError
from .market import LINEAR, Market, evaluate_utility

FACE_TOL = 1e-11
# retried in order when HiGHS reports a numerical failure
_FACE_OPTIONS = (HIGHS_OPTIONS, {**HIGHS_OPTIONS, "presolve": False}, {})


@dataclass
class EquilibriumReport:
    is_equilibrium: bool
    prices: np.ndarray
    clearing: np.ndarray            # sum_i x_ij - s_j, scaled by max(1, s_j)
    budget: np.ndarray              # w_i - p.x_i, scaled by max(1, w_i)
    optimality_gap: np.ndarray      # (opt_i - u_i(x_i)) / max(1, |opt_i|)
    allocation: np.ndarray | None   # the clearing allocation found on the optimal faces
    demand: np.ndarray | None       # sum of the agents' own IOP solutions
    tol: float
    reason: str = ""
    bundles: np.ndarray | None = None   # each agent's own IOP solution

    def to_dict(self) -> dict:
        def arr(v):
            return None if v is None else np.asarray(v).tolist()
        return {
            "is_equilibrium": self.is_equilibrium, "prices": arr(self.prices), "tol": self.tol,
            "clearing_residual": arr(self.clearing), "budget_residual": arr(self.budget),
            "optimality_gap": arr(self.optimality_gap), "allocation": arr(self.allocation),
            "demand": arr(self.demand), "reason": self.reason,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _face_lp(market: Market, p: np.ndarray, optima: np.ndarray, slack: float):
    """Allocation on the product of (near-)optimal faces closest to clearing with full spending.

    Variables: x (n*m), e+ and e- (m each) for the clearing gap. Spending shortfall
    enters the objective directly since p.x_i <= w_i is a constraint. Each agent's
    utility may fall short of its optimum by ``slack * max(1, |opt_i|)``.
    """
    n, m = market.n, market.m
    nx = n * m
    rows, rhs = [], []
    spend_cost = np.zeros(nx)
    for i, a in enumerate(market.agents):
        sl = slice(i * m, (i + 1) * m)
        scale_w = max(1.0, a.budget)
        # p.x_i <= w_i
        r = np.zeros(nx)
        r[sl] = p
        rows.append(r)
        rhs.append(a.budget)
        spend_cost[sl] = -p / scale_w
        # u_i.x_i >= opt_i - slack
        r = np.zeros(nx)
        r[sl] = -a.utility.coeffs
        rows.append(r)
        rhs.append(-(optima[i] - slack * max(1.0, abs(optima[i]))))
        for t in range(a.constraints.count):
            r = np.zeros(nx)
            r[sl] = a.constraints.A[t]
            rows.append(r)
            rhs.append(a.constraints.b[t])
    A_ub = sp.hstack([sp.csr_matrix(np.array(rows)), sp.csr_matrix((len(rows), 2 * m))], format="csr")
    scale_s = np.maximum(1.0, market.capacities)
    A_eq = sp.hstack([sp.kron(sp.csr_matrix(np.ones((1, n))), sp.identity(m)), -sp.identity(m), sp.identity(m)],
                     format="csr")
    cost = np.concatenate([spend_cost, 1.0 / scale_s, 1.0 / scale_s])
    for options in _FACE_OPTIONS:
        res = linprog(cost, A_ub=A_ub, b_ub=np.array(rhs), A_eq=A_eq, b_eq=market.capacities,
                      bounds=[(0.0, None)] * (nx + 2 * m), method="highs", options=options)
        if res.status == 0:
            return np.maximum(res.x[:nx].reshape(n, m), 0.0)
    raise SolverError(f"optimal-face LP failed: {res.message}")


def _residuals(market: Market, p: np.ndarray, optima: np.ndarray, X: np.ndarray):
    s = market.capacities
    w = market.budgets
    clearing = (X.sum(axis=0) - s) / np.maximum(1.0, s)
    budget = (w - X @ p) / np.maximum(1.0, w)
    values = np.array([evaluate_utility(a.utility, X[i])[0] for i, a in enumerate(market.agents)])
    gap = (optima - values) / np.maximum(1.0, np.abs(optima))
    return clearing, budget, gap


def _passes(clearing, budget, gap, tol) -> bool:
    return bool(np.max(np.abs(clearing)) <= tol and np.max(np.abs(budget), initial=0.0) <= tol
                and np.max(gap, initial=0.0) <= tol)


def check_equilibrium(market: Market, p, tol: float = 1e-6) -> EquilibriumReport:
    """Test whether ``p`` supports an equilibrium: some optimal bundles clear every
    good and exhaust every budget."""
    p = np.asarray(p, dtype=float)
    n, m = market.n, market.m
    if p.shape != (m,):
        raise ValueError(f"price vector has shape {p.shape}, expected ({m},)")
    nan = np.full(n, np.nan)
    bundles = np.zeros((n, m))
    optima = np.zeros(n)
    for i, a in enumerate(market.agents):
        try:
            sol = solve_iop(a, p)
        except UnboundedError as exc:
            return EquilibriumReport(False, p, np.full(m, np.nan), nan, nan, None, None, tol,
                                     reason=f"agent {i} has unbounded demand: {exc}")
        bundles[i] = sol.x
        optima[i] = sol.objective
    demand = bundles.sum(axis=0)
    if market.all_linear:
        # exact faces first; prices carrying rounding error can split a tie, so a
        # second search allows each agent half the utility gap the report tolerates
        X = _face_lp(market, p, optima, FACE_TOL)
        clearing, budget, gap = _residuals(market, p, optima, X)
        ok = _passes(clearing, budget, gap, tol)
        if not ok and tol > 2 * FACE_TOL:
            X2 = _face_lp(market, p, optima, 0.5 * tol)
            found = _residuals(market, p, optima, X2)
            if _passes(*found, tol):
                X, (clearing, budget, gap), ok = X2, found, True
    else:
        # smooth utilities here are strictly concave in the demanded goods: the optimum is unique
        X = bundles
        clearing, budget, gap = _residuals(market, p, optima, X)
        ok = _passes(clearing, budget, gap, tol)
    reason = ""
    if not ok:
        parts = []
        if np.max(np.abs(clearing)) > tol:
            j = int(np.argmax(np.abs(clearing)))
            parts.append(f"good {j} does not clear (residual {clearing[j]:.3g})")
        if np.max(np.abs(budget), initial=0.0) > tol:
            i = int(np.argmax(np.abs(budget)))
            parts.append(f"agent {i} leaves budget unspent (residual {budget[i]:.3g})")
        if np.max(gap, initial=0.0) > tol:
            i = int(np.argmax(gap))
            parts.append(f"agent {i} is not at an optimal bundle (gap {gap[i]:.3g})")
        reason = "; ".join(parts)
    return EquilibriumReport(ok, p, clearing, budget, gap, X, demand, tol, reason, bundles)


# --- KKT residuals --------------------------------------------------------------------

@dataclass
class KktResiduals:
    stationarity: float
    complementarity: float
    feasibility: float
    sign: float
    iop_stationarity: float
    iop_complementarity: float
    iop_feasibility: float
    budget_identity: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def worst(self) -> float:
        return float(max(self.stationarity, self.complementarity, self.feasibility, self.sign,
                         self.iop_stationarity, self.iop_complementarity, self.iop_feasibility,
                         np.max(np.abs(self.budget_identity), initial=0.0)))

    def to_dict(self) -> dict:
        out = {k: float(getattr(self, k)) for k in ("stationarity", "complementarity", "feasibility", "sign",
                                                    "iop_stationarity", "iop_complementarity",
                                                    "iop_feasibility")}
        out["budget_identity"] = np.asarray(self.budget_identity).tolist()
        return out


def kkt_residuals(market: Market, x, duals, lam=None) -> KktResiduals:
    """Largest violation of each KKT family for the perturbed social program and for
    the agents' own problems.

    ``duals`` needs ``p`` (capacity prices) and ``r`` (one multiplier vector per
    agent's rows); a :class:`BpsopSolution` works. The agent-side multipliers are
    derived by rescaling: budget multiplier ``u_i / (w_i + lam_i)`` and row
    multipliers ``r_i`` times the same factor.
    """
    X = np.asarray(x, dtype=float)
    n, m = market.n, market.m
    if X.shape != (n, m):
        raise ValueError(f"allocation has shape {X.shape}, expected ({n}, {m})")
    p = np.asarray(duals.p, dtype=float)
    r = [np.asarray(ri, dtype=float) for ri in duals.r]
    lam = np.zeros(n) if lam is None else np.asarray(lam, dtype=float)
    stat = comp = feas = sign = 0.0
    i_stat = i_comp = i_feas = 0.0
    identity = np.zeros(n)
    feas = max(feas, float(np.max(np.abs(X.sum(axis=0) - market.capacities))))
    feas = max(feas, float(np.max(-X, initial=0.0)))
    for i, a in enumerate(market.agents):
        xi = X[i]
        A, b = a.constraints.A, a.constraints.b
        weight = a.budget + lam[i]
        u, grad_u = evaluate_utility(a.utility, np.maximum(xi, 0.0))
        Ar = A.T @ r[i] if a.constraints.count else np.zeros(m)
        if a.constraints.count:
            slack = b - A @ xi
            feas = max(feas, float(np.max(-slack, initial=0.0)))
            sign = max(sign, float(np.max(-r[i], initial=0.0)))
            comp = max(comp, float(np.max(np.abs(r[i] * slack), initial=0.0)))
            rb = float(r[i] @ b)
        else:
            rb = 0.0
        if u <= 0:
            stat = np.inf
            continue
        g = weight * grad_u / u - p - Ar
        stat = max(stat, float(np.max(g, initial=0.0)))
        comp = max(comp, float(np.max(np.abs(xi * g), initial=0.0)))
        # agent side: grad u - y p - A^T rho <= 0 with y = u / weight, rho = y r
        scale = u / weight
        gi = grad_u - scale * (p + Ar)
        i_stat = max(i_stat, float(np.max(gi, initial=0.0)))
        i_comp = max(i_comp, float(np.max(np.abs(xi * gi), initial=0.0)))
        spend = float(p @ xi)
        i_feas = max(i_feas, max(spend - a.budget, 0.0))
        identity[i] = weight - spend - rb
    return KktResiduals(stat, comp, feas, sign, i_stat, i_comp, i_feas, identity)


# --- grid refutation -------------------------------------------------------------------

@dataclass
class GridRefutation:
    all_failed: bool
    best_residual: float
    best_price: np.ndarray | None
    points: int
    price_box: list
    steps: list
    certified: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"all_failed": self.all_failed, "best_residual": self.best_residual,
                "best_price": None if self.best_price is None else self.best_price.tolist(),
                "points": self.points, "price_box": self.price_box, "steps": self.steps,
                "certified": [c.tolist() for c in self.certified],
                "note": "grid evidence only; not a proof of non-existence"}


def _score(report: EquilibriumReport) -> float:
    if report.allocation is None:
        return np.inf
    return float(max(np.max(np.abs(report.clearing)), np.max(np.abs(report.budget), initial=0.0),
                     np.max(report.optimality_gap, initial=0.0)))


def refute_equilibrium_grid(market: Market, price_box, steps, tol: float = 1e-6) -> GridRefutation:
    """Evaluate :func:`check_equilibrium` on a price grid.

    ``price_box`` is one ``(low, high)`` pair per good, or a single pair used for
    every good; ``steps`` is the number of grid points per good (an int or one per
    good). Returns whether every point fails and the least-infeasible point.
    """
    if not market.all_linear:
        raise ValueError("grid refutation needs linear utilities")
    m = market.m
    box = np.asarray(price_box, dtype=float)
    if box.shape == (2,):
        box = np.tile(box, (m, 1))
    if box.shape != (m, 2) or not np.all(np.isfinite(box)) or np.any(box[:, 0] > box[:, 1]):
        raise ValueError("price_box must give a finite (low, high) pair per good")
    counts = np.broadcast_to(np.asarray(steps, dtype=int), (m,))
    if np.any(counts < 1):
        raise ValueError("steps must be at least 1")
    axes = [np.linspace(lo, hi, k) if k > 1 else np.array([lo]) for (lo, hi), k in zip(box, counts)]
    best, best_p = np.inf, None
    certified = []
    total = 0
    for point in itertools.product(*axes):
        p = np.array(point)
        total += 1
        rep = check_equilibrium(market, p, tol)
        score = _score(rep)
        if rep.is_equilibrium:
            certified.append(p)
        if score < best:
            best, best_p = score, p
    return GridRefutation(not certified, float(best), best_p, total, box.tolist(), counts.tolist(), certified)
