"""Alternating-direction price discovery: AMA and ADMM in the two-block form.

Agents update their own bundles ``x_i`` given prices (the only per-agent work),
then a coordinator computes the baseline demand ``y`` in closed form and moves
prices along the clearing residual. ``ADMM_NH`` additionally carries multipliers
``r`` for non-homogeneous rows, entered through hinge penalties.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .iop import solve_iop
from .kernels import (InteriorStart, SmoothProgram, UnboundedError, barrier_solve,
                      find_interior, spectral_radius)
from .market import COBB_DOUGLAS, LINEAR, Agent, Market, MarketError, log_utility_derivs, require_valid

log = logging.getLogger(__name__)

AMA = "AMA"
ADMM = "ADMM"
ADMM_NH = "ADMM_NH"
VARIANTS = (AMA, ADMM, ADMM_NH)

INNER_TOL = 1e-9


@dataclass
class AdmConfig:
    variant: str = ADMM
    beta: float = 1.0
    tol: float = 1e-4
    max_iter: int = 5000
    p0: np.ndarray | None = None       # default: all ones
    y0: np.ndarray | None = None       # default: capacities split evenly
    r0: tuple | None = None            # default: zeros
    agent_prices: bool = False         # AMA: keep one price vector per agent

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter at least 1")


@dataclass
class AdmState:
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    r: tuple
    k: int = 0
    p_agent: np.ndarray | None = None

    def copy(self) -> "AdmState":
        return AdmState(self.x.copy(), self.y.copy(), self.p.copy(), tuple(ri.copy() for ri in self.r),
                        self.k, None if self.p_agent is None else self.p_agent.copy())


@dataclass
class ConvergenceTrace:
    prices: list = field(default_factory=list)
    primal: list = field(default_factory=list)
    clearing: list = field(default_factory=list)
    dual: list = field(default_factory=list)
    violation: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    message: str = ""
    prices_positive: bool = True
    nonhomogeneous: bool = False

    @property
    def iterations(self) -> int:
        return len(self.primal)

    def max_residual(self, k: int = -1) -> float:
        vals = [self.primal[k], self.clearing[k], self.dual[k]]
        if self.nonhomogeneous:
            vals.append(self.violation[k])
        return float(max(vals))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        m = len(self.prices[0]) if self.prices else 0
        head = ["iter"] + [f"p_{j + 1}" for j in range(m)] + ["res_primal", "res_clearing", "res_dual", "res_violation"]
        n = len(self.lambdas[0]) if self.nonhomogeneous and self.lambdas else 0
        head += [f"lambda_{i + 1}" for i in range(n)]
        w.writerow(head)
        for k in range(self.iterations):
            row = [k + 1] + [repr(float(v)) for v in self.prices[k]]
            row += [repr(float(self.primal[k])), repr(float(self.clearing[k])), repr(float(self.dual[k])),
                    repr(float(self.violation[k]))]
            if n:
                row += [repr(float(v)) for v in self.lambdas[k]]
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "prices": [np.asarray(p).tolist() for p in self.prices],
            "primal": list(map(float, self.primal)), "clearing": list(map(float, self.clearing)),
            "dual": list(map(float, self.dual)), "violation": list(map(float, self.violation)),
            "lambdas": [np.asarray(v).tolist() for v in self.lambdas],
            "converged": self.converged, "diverged": self.diverged, "message": self.message,
            "prices_positive": self.prices_positive,
        }


# --- x-step ------------------------------------------------------------------------

def _linear_prox(u, p, y, beta, W):
    """argmax W log(u.x) - p.x - beta/2 |x - y|^2 over x >= 0, exactly.

    Stationarity gives x_j = max(0, y_j + (W u_j / U - p_j) / beta) with U = u.x;
    U solves a quadratic once the set of positive coordinates is known, and that
    set is nested in U, so the breakpoints are scanned in order.
    """
    x = np.maximum(0.0, y - p / beta)     # goods with u_j = 0
    pos = u > 0
    if not np.any(pos):
        raise MarketError("utility vector is all zeros")
    up, yp, pp = u[pos], y[pos], p[pos]
    c = pp - beta * yp
    # j stays positive while U < tau_j
    with np.errstate(divide="ignore"):
        tau = np.where(c > 0, W * up / np.where(c > 0, c, 1.0), np.inf)
    order = np.argsort(-tau, kind="stable")
    for k in range(1, up.size + 1):
        act = order[:k]
        if k < up.size and np.isinf(tau[order[k]]):
            continue
        a = float(up[act] @ (yp[act] - pp[act] / beta))
        b = W * float(up[act] @ up[act]) / beta
        U = 0.5 * (a + np.sqrt(a * a + 4.0 * b)) if a >= 0 else 2.0 * b / (np.sqrt(a * a + 4.0 * b) - a)
        lo = tau[order[k]] if k < up.size else 0.0
        if U < tau[act[-1]] and U >= lo:
            break
    xp = np.maximum(0.0, yp + (W * up / U - pp) / beta)
    x[pos] = xp
    return x


def _cobb_douglas_prox(alpha, p, y, beta, W):
    x = np.maximum(0.0, y - p / beta)
    pos = alpha > 0
    b = p[pos] - beta * y[pos]
    q = 4.0 * beta * W * alpha[pos]
    disc = np.sqrt(b * b + q)
    # pick the cancellation-free form of the positive root
    x[pos] = np.where(b >= 0, 2.0 * W * alpha[pos] / (b + disc), (disc - b) / (2.0 * beta))
    return x


def _ama_closed_form(agent: Agent, p, W):
    u = agent.utility.coeffs
    m = agent.m
    x = np.zeros(m)
    if agent.utility.kind == LINEAR:
        if np.any((u > 0) & (p <= 0)):
            raise UnboundedError("a wanted good has a nonpositive price")
        ratio = np.where(u > 0, u / np.where(p > 0, p, 1.0), -np.inf)
        j = int(np.argmax(ratio))
        x[j] = W / p[j]
        return x
    pos = u > 0
    if np.any(p[pos] <= 0):
        raise UnboundedError("a wanted good has a nonpositive price")
    x[pos] = W * u[pos] / p[pos]
    return x


def _smooth_x_update(agent: Agent, p, y, beta, W, r, prox: bool, start_cache: dict | None):
    """Barrier route for rows, CES utilities, and the hinge-penalized variant."""
    m = agent.m
    A, b = agent.constraints.A, agent.constraints.b
    l = agent.constraints.count
    spec = agent.utility
    hinge = r is not None
    nz = l if hinge else 0
    dim = m + nz

    def oracle(v):
        x = v[:m]
        f, g, H = log_utility_derivs(spec, x)
        if not np.isfinite(f):
            return -np.inf, None, None
        val = W * f - p @ x
        grad = np.zeros(dim)
        grad[:m] = W * g - p
        hess = np.zeros((dim, dim))
        hess[:m, :m] = W * H
        if prox:
            d = x - y
            val -= 0.5 * beta * float(d @ d)
            grad[:m] -= beta * d
            hess[:m, :m] -= beta * np.eye(m)
        if hinge:
            z = v[m:]
            val -= float(r @ z) + 0.5 * beta * float(z @ z)
            grad[m:] = -r - beta * z
            hess[m:, m:] = -beta * np.eye(nz)
        return val, grad, hess

    if hinge:
        # A x - z <= b, x >= 0, z >= 0
        G = np.block([[A, -np.eye(nz)], [-np.eye(m), np.zeros((m, nz))], [np.zeros((nz, m)), -np.eye(nz)]])
        h = np.concatenate([b, np.zeros(m + nz)])
    else:
        G = np.vstack([A, -np.eye(m)]) if l else -np.eye(m)
        h = np.concatenate([b, np.zeros(m)]) if l else np.zeros(m)
    start = None if start_cache is None else start_cache.get("start")
    if start is None:
        if hinge or not l:
            x0 = np.full(m, 1.0)
            v0 = np.concatenate([x0, np.maximum(A @ x0 - b, 0.0) + 1.0]) if hinge else x0
            start = InteriorStart(x=v0, implicit=np.zeros(h.size, dtype=bool), eq_rows=np.arange(0))
        else:
            start = find_interior(SmoothProgram(oracle, dim, G, h))
        if start_cache is not None:
            start_cache["start"] = start
    prog = SmoothProgram(oracle, dim, G, h)
    sol = barrier_solve(prog, tol=INNER_TOL, start=start)
    return np.maximum(sol.x[:m], 0.0)


def x_update(variant: str, agent: Agent, p, y_i, r_i=None, beta: float = 1.0, *,
             start_cache: dict | None = None) -> np.ndarray:
    """One agent's bundle for the next iterate.

    ``p`` is the price vector the agent sees (its own price vector for AMA with
    per-agent prices). ``start_cache`` lets repeated calls for the same agent reuse
    an interior point of its feasible set.
    """
    p = np.asarray(p, dtype=float)
    y_i = np.asarray(y_i, dtype=float)
    W = agent.budget
    kind = agent.utility.kind
    rows = agent.constraints.count
    if variant == AMA:
        if rows == 0 and kind in (LINEAR, COBB_DOUGLAS):
            return _ama_closed_form(agent, p, W)
        if kind == LINEAR:
            # with cone rows the optimum spends exactly W: the IOP at budget W
            return solve_iop(agent, p).x
        return _smooth_x_update(agent, p, y_i, beta, W, None, False, start_cache)
    if variant == ADMM:
        if rows == 0 and kind == LINEAR:
            return _linear_prox(agent.utility.coeffs, p, y_i, beta, W)
        if rows == 0 and kind == COBB_DOUGLAS:
            return _cobb_douglas_prox(agent.utility.coeffs, p, y_i, beta, W)
        return _smooth_x_update(agent, p, y_i, beta, W, None, True, start_cache)
    if variant == ADMM_NH:
        r_i = np.zeros(rows) if r_i is None else np.asarray(r_i, dtype=float)
        W = agent.budget + float(r_i @ agent.constraints.b)
        if rows == 0:
            return x_update(ADMM, agent.with_budget(W), p, y_i, None, beta)
        return _smooth_x_update(agent, p, y_i, beta, W, r_i, True, start_cache)
    raise ValueError(f"unknown variant {variant!r}")


# --- coordinator steps -------------------------------------------------------------

def y_update(x, capacities, p_agent=None, p=None, beta: float = 1.0) -> np.ndarray:
    """Closed-form baseline demand: y_ij = x_ij - c_j with c_j = (sum_i x_ij - s_j) / (n + 1).

    With per-agent prices that differ from the market price the shift picks up the
    price gaps as well.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    s = np.asarray(capacities, dtype=float)
    if p_agent is None:
        c = (x.sum(axis=0) - s) / (n + 1)
        return x - c
    gap = (np.asarray(p_agent, dtype=float) - np.asarray(p, dtype=float)) / beta
    c = (x.sum(axis=0) - s + gap.sum(axis=0)) / (n + 1)
    return x + gap - c


def violations(market: Market, x) -> tuple:
    return tuple(np.maximum(a.constraints.A @ x[i] - a.constraints.b, 0.0) if a.constraints.count else np.zeros(0)
                 for i, a in enumerate(market.agents))


def dual_updates(p, y, capacities, beta: float, r=None, hinge=None):
    """Price ascent on the clearing residual and, if given, r ascent on the hinges."""
    p_new = np.asarray(p, dtype=float) + beta * (np.asarray(y).sum(axis=0) - np.asarray(capacities))
    if r is None:
        return p_new, None
    return p_new, tuple(ri + beta * hi for ri, hi in zip(r, hinge))


def _lambdas(market: Market, r) -> np.ndarray:
    return np.array([float(ri @ a.constraints.b) if a.constraints.count else 0.0
                     for ri, a in zip(r, market.agents)])


def initial_state(market: Market, config: AdmConfig) -> AdmState:
    n, m = market.n, market.m
    p = np.ones(m) if config.p0 is None else np.asarray(config.p0, dtype=float).copy()
    y = np.tile(market.capacities / n, (n, 1)) if config.y0 is None else np.asarray(config.y0, dtype=float).copy()
    if p.shape != (m,) or y.shape != (n, m):
        raise ValueError("initial prices or baseline demand have the wrong shape")
    if config.r0 is None:
        r = tuple(np.zeros(a.constraints.count) for a in market.agents)
    else:
        r = tuple(np.asarray(ri, dtype=float).copy() for ri in config.r0)
        if any(np.any(ri < 0) for ri in r):
            raise ValueError("initial r must be nonnegative")
    p_agent = np.tile(p, (n, 1)) if (config.variant == AMA and config.agent_prices) else None
    return AdmState(x=y.copy(), y=y, p=p, r=r, k=0, p_agent=p_agent)


def agent_prices_for(state: AdmState, i: int) -> np.ndarray:
    return state.p if state.p_agent is None else state.p_agent[i]


def aggregate(market: Market, config: AdmConfig, state: AdmState, X: np.ndarray) -> tuple[AdmState, dict]:
    """Coordinator half of an iteration: given the new bundles, update y, prices and r.

    Returns the next state and the residuals for this iteration. Both the
    in-process loop and the message-passing simulator call this.
    """
    beta = config.beta
    s = market.capacities
    y = y_update(X, s, state.p_agent, state.p, beta)
    hinge = violations(market, X) if config.variant == ADMM_NH else None
    p_new, r_new = dual_updates(state.p, y, s, beta, state.r if hinge is not None else None, hinge)
    p_agent = None
    if state.p_agent is not None:
        p_agent = state.p_agent + beta * (X - y)
    viol = float(np.sqrt(sum(float(h @ h) for h in hinge))) if hinge is not None else 0.0
    res = {
        "primal": float(np.linalg.norm(X - y)),
        "clearing": float(np.linalg.norm(y.sum(axis=0) - s)),
        "dual": float(beta * np.linalg.norm(y - state.y)),
        "violation": viol,
    }
    nxt = AdmState(x=X, y=y, p=p_new, r=r_new if r_new is not None else state.r, k=state.k + 1, p_agent=p_agent)
    return nxt, res


def record(trace: ConvergenceTrace, market: Market, state: AdmState, res: dict) -> None:
    trace.prices.append(state.p.copy())
    trace.primal.append(res["primal"])
    trace.clearing.append(res["clearing"])
    trace.dual.append(res["dual"])
    trace.violation.append(res["violation"])
    if trace.nonhomogeneous:
        trace.lambdas.append(_lambdas(market, state.r))
    if trace.prices_positive and np.any(state.p <= 0):
        trace.prices_positive = False
        log.info("iteration %d: a price is nonpositive; convergence claims become empirical", state.k)


def check_variant(market: Market, variant: str) -> None:
    if variant in (AMA, ADMM) and not market.homogeneous:
        raise MarketError(f"{variant} needs homogeneous rows (or none); use {ADMM_NH}")


def run_adm(market: Market, config: AdmConfig | None = None) -> tuple[ConvergenceTrace, AdmState]:
    config = config or AdmConfig()
    require_valid(market)
    check_variant(market, config.variant)
    state = initial_state(market, config)
    trace = ConvergenceTrace(nonhomogeneous=config.variant == ADMM_NH)
    caches = [dict() for _ in range(market.n)]
    for _ in range(config.max_iter):
        try:
            X = np.array([x_update(config.variant, a, agent_prices_for(state, i), state.y[i], state.r[i],
                                   config.beta, start_cache=caches[i])
                          for i, a in enumerate(market.agents)])
        except UnboundedError as exc:
            trace.diverged = True
            trace.message = f"iteration {state.k + 1}: {exc}"
            log.info("run stopped: %s", trace.message)
            break
        state, res = aggregate(market, config, state, X)
        record(trace, market, state, res)
        if not np.all(np.isfinite(state.p)):
            trace.diverged = True
            trace.message = "prices diverged"
            break
        if trace.max_residual() <= config.tol:
            trace.converged = True
            break
    return trace, state


# --- step-size bound -----------------------------------------------------------------

@dataclass(frozen=True)
class BetaBound:
    beta_max: float
    sigma: float
    rho: float
    valid: bool        # False when no positive step size is guaranteed (linear utilities)


def constraint_matrix(n: int, m: int) -> sp.csr_matrix:
    """Coefficients of the baseline-demand block in the clearing and copy constraints."""
    clearing = sp.kron(sp.csr_matrix(np.ones((1, n))), sp.identity(m), format="csr")
    return sp.vstack([clearing, sp.identity(n * m, format="csr")], format="csr")


def ama_beta_bound(market: Market, sample_count: int = 64, seed: int = 0, eps: float = 1e-3) -> BetaBound:
    """Estimate 2 sigma / rho(B^T B) for AMA.

    sigma is the smallest curvature of -sum_i w_i log u_i over sampled feasible
    points: each good's capacity is split across the agents plus an unsold share
    by a flat Dirichlet draw, and coordinates are floored at ``eps``. rho comes
    from power iteration on B^T B.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be at least 1")
    n, m = market.n, market.m
    B = constraint_matrix(n, m)
    rho = spectral_radius((B.T @ B).toarray())
    if any(a.utility.kind == LINEAR for a in market.agents):
        return BetaBound(0.0, 0.0, rho, False)
    rng = np.random.default_rng(seed)
    s = market.capacities
    points = [rng.dirichlet(np.ones(n + 1), size=m).T[:n] * s for _ in range(sample_count)]
    sigma = np.inf
    for P in points:
        for i, a in enumerate(market.agents):
            _, _, H = log_utility_derivs(a.utility, np.maximum(P[i], eps))
            lam = np.linalg.eigvalsh(-a.budget * H)
            sigma = min(sigma, float(lam[0]))
    sigma = max(sigma, 0.0)
    return BetaBound(2.0 * sigma / rho, sigma, rho, sigma > 0)
