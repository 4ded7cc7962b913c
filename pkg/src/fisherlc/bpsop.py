"""Centralized convex program with budget perturbations and its fixed-point scheme.

The program maximizes ``sum_i (w_i + lam_i) log u_i(x_i)`` over allocations that
exhaust capacities and respect every agent's rows. Capacity multipliers are the
prices; row multipliers ``r`` feed the perturbation update ``lam_i = sum_t r_it b_it``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .kernels import (SPARSE_DIM, InfeasibleError, InteriorStart, SolverError, KktSolution, SmoothProgram, barrier_solve,
                      find_interior, lp_solve)
from .market import LINEAR, Market, MarketError, evaluate_utility, log_utility_derivs, require_valid

log = logging.getLogger(__name__)


@dataclass
class BpsopSolution:
    x: np.ndarray                  # n x m
    p: np.ndarray
    r: tuple[np.ndarray, ...]
    lam: np.ndarray
    objective: float
    s: np.ndarray                  # nonnegativity duals, <= 0
    kkt: KktSolution

    @property
    def weighted_r(self) -> np.ndarray:
        """``sum_t r_it b_it`` per agent."""
        return np.array([0.0 if ri.size == 0 else float(ri @ bi) for ri, bi in zip(self.r, self._b)])

    _b: tuple = ()

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(), "p": self.p.tolist(), "r": [ri.tolist() for ri in self.r],
            "lambda": self.lam.tolist(), "objective": self.objective,
            "residuals": {"stationarity": self.kkt.stationarity, "feasibility": self.kkt.feasibility,
                          "complementarity": self.kkt.complementarity},
        }


class BpsopSolver:
    """Holds the constraint structure and a reusable interior point for one market.

    ``capacity='eq'`` is the equilibrium program; ``'leq'`` relaxes capacities to
    inequalities (used by the homogeneous existence test).
    """

    def __init__(self, market: Market, capacity: str = "eq"):
        require_valid(market)
        if capacity not in ("eq", "leq"):
            raise ValueError("capacity must be 'eq' or 'leq'")
        self.market = market
        self.capacity = capacity
        n, m = market.n, market.m
        self.n, self.m = n, m
        self.dim = n * m
        self.sparse = self.dim > SPARSE_DIM
        blocks, rhs, self.row_slices = [], [], []
        off = 0
        for a in market.agents:
            l = a.constraints.count
            blocks.append(sp.csr_matrix(a.constraints.A) if l else sp.csr_matrix((0, m)))
            rhs.append(a.constraints.b)
            self.row_slices.append(slice(off, off + l))
            off += l
        self.n_rows = off
        rows = sp.block_diag(blocks, format="csr") if off else sp.csr_matrix((0, self.dim))
        if rows.shape[1] != self.dim:
            rows = sp.csr_matrix((rows.shape[0], self.dim))
        caprows = sp.kron(sp.csr_matrix(np.ones((1, n))), sp.identity(m), format="csr")
        parts = [rows, -sp.identity(self.dim, format="csr")]
        hparts = [np.concatenate(rhs) if rhs else np.zeros(0), np.zeros(self.dim)]
        if capacity == "leq":
            parts.append(caprows)
            hparts.append(market.capacities.copy())
            E, d = None, None
        else:
            E, d = caprows, market.capacities.copy()
        G = sp.vstack(parts, format="csr")
        self.G = G if self.sparse else G.toarray()
        self.h = np.concatenate(hparts)
        self.E = (E if self.sparse else E.toarray()) if E is not None else None
        self.d = d
        self.b_all = hparts[0]
        # lam_i = sum over agent i's rows of r * b
        C = np.zeros((n, self.h.shape[0]))
        for i, sl in enumerate(self.row_slices):
            C[i, sl] = self.b_all[sl]
        self.lambda_map = C
        self._start: InteriorStart | None = None
        self._linear = market.all_linear
        if self._linear:
            self.U = np.array([a.utility.coeffs for a in market.agents])
        ii, aa, bb = np.meshgrid(np.arange(n), np.arange(m), np.arange(m), indexing="ij")
        self._hrows = (ii * m + aa).ravel()
        self._hcols = (ii * m + bb).ravel()

    def _oracle(self, weights: np.ndarray):
        n, m = self.n, self.m
        agents = self.market.agents
        sparse = self.sparse

        def oracle(z):
            X = z.reshape(n, m)
            if self._linear:
                Ui = np.einsum("ij,ij->i", X, self.U)
                if np.any(Ui <= 0):
                    return -np.inf, None, None
                f = float(weights @ np.log(Ui))
                G = (weights / Ui)[:, None] * self.U
                scale = weights / Ui ** 2
                blocks = -scale[:, None, None] * self.U[:, :, None] * self.U[:, None, :]
            else:
                f = 0.0
                G = np.empty((n, m))
                blocks = np.empty((n, m, m))
                for i, a in enumerate(agents):
                    v, g, H = log_utility_derivs(a.utility, X[i])
                    if not np.isfinite(v):
                        return -np.inf, None, None
                    f += weights[i] * v
                    G[i] = weights[i] * g
                    blocks[i] = weights[i] * H
            if sparse:
                H = sp.csr_matrix((blocks.ravel(), (self._hrows, self._hcols)), shape=(n * m, n * m))
            else:
                H = np.zeros((n * m, n * m))
                H[self._hrows, self._hcols] = blocks.ravel()
            return f, G.ravel(), H

        return oracle

    def program(self, lam) -> SmoothProgram:
        weights = self.market.budgets + np.asarray(lam, dtype=float)
        return SmoothProgram(self._oracle(weights), self.dim, self.G, self.h, self.E, self.d, block=self.m)

    def interior(self, program: SmoothProgram) -> InteriorStart:
        if self._start is None:
            start = find_interior(program)
            if not np.isfinite(program.oracle(start.x)[0]):
                start = self._lift_utilities(start)
            self._start = start
        return self._start

    def _lift_utilities(self, start: InteriorStart) -> InteriorStart:
        # the relative-interior point leaves some agent with zero utility; move halfway
        # toward the allocation maximizing the smallest utility
        if not self._linear:
            raise InfeasibleError("no feasible allocation gives every agent positive utility")
        n, m = self.n, self.m
        nv = self.dim + 1
        floor = sp.hstack([-sp.block_diag([sp.csr_matrix(u[None, :]) for u in self.U]),
                           sp.csr_matrix(np.ones((n, 1)))], format="csr")
        G = sp.vstack([sp.hstack([sp.csr_matrix(self.G), sp.csr_matrix((self.h.size, 1))]), floor], format="csr")
        h = np.concatenate([self.h, np.zeros(n)])
        E = sp.hstack([sp.csr_matrix(self.E), sp.csr_matrix((self.m, 1))]).toarray() if self.E is not None else None
        c = np.zeros(nv)
        c[-1] = 1.0
        lp = lp_solve(c, G.toarray(), h, E, self.d)
        if lp.objective <= 1e-12:
            raise InfeasibleError("no feasible allocation gives every agent positive utility")
        x = 0.5 * (start.x + lp.x[:self.dim])
        return InteriorStart(x=x, implicit=start.implicit, eq_rows=start.eq_rows)

    def solve(self, lam=None, tol: float = 1e-9) -> BpsopSolution:
        n, m = self.n, self.m
        lam = np.zeros(n) if lam is None else np.asarray(lam, dtype=float)
        if lam.shape != (n,) or np.any(lam < 0):
            raise ValueError("lam must be a nonnegative vector with one entry per agent")
        prog = self.program(lam)
        start = self.interior(prog)
        sol = barrier_solve(prog, tol=tol, start=start, dual_target=(self.lambda_map, lam))
        X = sol.x.reshape(n, m)
        mu = sol.mu
        r = tuple(mu[sl].copy() for sl in self.row_slices)
        s = -mu[self.n_rows:self.n_rows + self.dim].reshape(n, m)
        if self.capacity == "eq":
            p = sol.nu.copy()
        else:
            p = mu[self.n_rows + self.dim:].copy()
        out = BpsopSolution(x=X, p=p, r=r, lam=lam, objective=sol.objective, s=s, kkt=sol)
        out._b = tuple(self.b_all[sl] for sl in self.row_slices)
        return out


def solve_bpsop(market: Market, lam=None, tol: float = 1e-9) -> BpsopSolution:
    return BpsopSolver(market).solve(lam, tol=tol)


@dataclass
class FixedPointResult:
    lam: np.ndarray
    solution: BpsopSolution
    residuals: list[float]
    converged: bool
    lambdas: list[np.ndarray] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    def to_dict(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations,
                "lambda": self.lam.tolist(), "residuals": list(self.residuals),
                "prices": self.solution.p.tolist(), "allocation": self.solution.x.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def residual_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "residual"])
        for k, r in enumerate(self.residuals):
            w.writerow([k, repr(float(r))])
        return buf.getvalue()


def fixed_point(market: Market, lam0=None, tol: float = 1e-5, max_iter: int = 500,
                damping: float = 0.0, solver_tol: float = 1e-9) -> FixedPointResult:
    """Iterate ``lam <- sum_t r_t b_t`` until the residual drops below ``tol``."""
    if not (0.0 <= damping < 1.0):
        raise ValueError("damping must lie in [0, 1)")
    solver = BpsopSolver(market)
    lam = np.zeros(market.n) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    if np.any(lam < 0):
        raise ValueError("lam0 must be nonnegative")
    residuals, lams = [], []
    sol = None
    converged = False
    for k in range(max_iter):
        sol = solver.solve(lam, tol=solver_tol)
        if sol.kkt.complementarity > solver_tol or sol.kkt.stationarity > 1e3 * solver_tol:
            log.info("iteration %d: loose multipliers, re-solving with tighter tolerance", k)
            try:
                sol = solver.solve(lam, tol=solver_tol * 1e-2)
            except SolverError as exc:
                log.info("tighter re-solve failed (%s); keeping the first solution", exc)
        target = sol.weighted_r
        res = float(np.linalg.norm(lam - target))
        residuals.append(res)
        lams.append(lam.copy())
        log.debug("fixed point iteration %d residual %.3e", k, res)
        if res <= tol:
            converged = True
            break
        lam = (1.0 - damping) * target + damping * lam
        lam = np.maximum(lam, 0.0)
    return FixedPointResult(lam=lam, solution=sol, residuals=residuals, converged=converged, lambdas=lams)


@dataclass(frozen=True)
class ExistenceTest:
    exists: bool
    slack: np.ndarray
    solution: BpsopSolution


def existence_test_homogeneous(market: Market, tol: float = 1e-6) -> ExistenceTest:
    """With homogeneous rows an equilibrium exists iff the relaxed program sells out."""
    if not market.homogeneous:
        raise MarketError("existence test needs homogeneous rows (all right-hand sides zero)")
    sol = BpsopSolver(market, capacity="leq").solve(None)
    slack = market.capacities - sol.x.sum(axis=0)
    return ExistenceTest(bool(np.all(slack <= tol * np.maximum(1.0, market.capacities))), slack, sol)


@dataclass(frozen=True)
class ParetoCertificate:
    is_pareto: bool
    gain: float
    dominating: np.ndarray | None
    local: bool = False


def pareto_certificate(market: Market, x, tol: float = 1e-7, feas_tol: float = 1e-6) -> ParetoCertificate:
    """LP search for a feasible reallocation that weakly improves every agent.

    For non-linear utilities the utility floor is linearized at ``x``; the result is
    flagged ``local``.
    """
    n, m = market.n, market.m
    X = np.asarray(x, dtype=float).reshape(n, m)
    _check_allocation(market, X, feas_tol)
    nv = n * m + n
    rows, rhs = [], []
    for j in range(m):
        r = np.zeros(nv)
        r[j:n * m:m] = 1.0
        rows.append(r)
        rhs.append(market.capacities[j])
    local = False
    for i, a in enumerate(market.agents):
        A, b = a.constraints.A, a.constraints.b
        for t in range(a.constraints.count):
            r = np.zeros(nv)
            r[i * m:(i + 1) * m] = A[t]
            rows.append(r)
            rhs.append(b[t])
        if a.utility.kind == LINEAR:
            g = a.utility.coeffs
            floor = float(g @ X[i])
        else:
            local = True
            val, g = evaluate_utility(a.utility, X[i])
            g = np.where(np.isfinite(g), g, 1e12)
            floor = float(g @ X[i])
        r = np.zeros(nv)
        r[i * m:(i + 1) * m] = -g
        r[n * m + i] = 1.0
        rows.append(r)
        rhs.append(-floor)
    G = np.vstack(rows + [-np.eye(nv)])
    h = np.concatenate([rhs, np.zeros(nv)])
    c = np.concatenate([np.zeros(n * m), np.ones(n)])
    sol = lp_solve(c, G, h)
    gain = float(sol.objective)
    if gain <= tol:
        return ParetoCertificate(True, gain, None, local)
    return ParetoCertificate(False, gain, sol.x[:n * m].reshape(n, m), local)


def _check_allocation(market: Market, X: np.ndarray, tol: float) -> None:
    if np.any(X < -tol):
        raise MarketError("allocation has negative entries")
    if np.any(X.sum(axis=0) > market.capacities + tol * np.maximum(1.0, market.capacities)):
        raise MarketError("allocation exceeds capacities")
    for i, a in enumerate(market.agents):
        if a.constraints.count and np.any(a.constraints.A @ X[i] > a.constraints.b + tol):
            raise MarketError(f"allocation violates agent {i}'s rows")


@dataclass(frozen=True)
class BudgetSlackReport:
    slack: np.ndarray            # w_i - p.x_i
    identity: np.ndarray         # sum_t r_it b_it
    discrepancy: float
    prices: np.ndarray


def budget_slack_report(market: Market) -> BudgetSlackReport:
    """Budget left unspent at the unperturbed program's prices."""
    sol = BpsopSolver(market).solve(None)
    spent = np.einsum("ij,j->i", sol.x, sol.p)
    slack = market.budgets - spent
    ident = sol.weighted_r
    return BudgetSlackReport(slack, ident, float(np.max(np.abs(slack - ident))), sol.p)
