"""Numerical kernels: a log-barrier path-following solver with dual recovery,
an LP wrapper, finite-difference derivative checks and power iteration."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

log = logging.getLogger(__name__)

T_INIT = 1.0
T_FACTOR = 10.0
NEWTON_TOL = 1e-10
ARMIJO = 0.25
BACKTRACK = 0.5
PHASE1_TOL = 1e-9
SPARSE_DIM = 300
UNBOUNDED_NORM = 1e12
HIGHS_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


class SolverError(RuntimeError):
    pass


class InfeasibleError(SolverError):
    pass


class UnboundedError(SolverError):
    pass


class MaxIterationsError(SolverError):
    pass


Oracle = Callable[[np.ndarray], tuple]


@dataclass
class SmoothProgram:
    """Maximize a concave ``oracle`` objective subject to ``G x <= h`` and ``E x = d``.

    The oracle maps x to ``(value, gradient, hessian)``; value ``-inf`` marks points
    outside the objective's domain. G and E may be dense arrays or scipy sparse.
    """

    oracle: Oracle
    dim: int
    G: object = None
    h: np.ndarray | None = None
    E: object = None
    d: np.ndarray | None = None
    x0: np.ndarray | None = None   # optional point inside the objective's domain
    block: int | None = None       # Hessian is block diagonal in consecutive blocks of this size

    def __post_init__(self):
        self.G, self.h = _rows(self.G, self.h, self.dim)
        self.E, self.d = _rows(self.E, self.d, self.dim)

    @property
    def sparse(self) -> bool:
        return self.dim > SPARSE_DIM


def _rows(M, rhs, dim):
    if M is None:
        return np.zeros((0, dim)), np.zeros(0)
    if not sp.issparse(M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.size == 0:
            M = M.reshape(0, dim)
    rhs = np.asarray(rhs, dtype=float).reshape(-1)
    if M.shape[1] != dim or M.shape[0] != rhs.shape[0]:
        raise ValueError(f"constraint block of shape {M.shape} does not fit dim={dim}, rhs={rhs.shape}")
    return M, rhs


def _dense(M) -> np.ndarray:
    return M.toarray() if sp.issparse(M) else np.asarray(M)


def _as_mode(M, sparse: bool):
    if sparse:
        return sp.csr_matrix(M)
    return _dense(M)


@dataclass
class KktSolution:
    x: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    objective: float
    stationarity: float
    feasibility: float
    complementarity: float
    t: float
    status: str = "optimal"
    iterations: int = 0
    history: list = field(default_factory=list)
    implicit: np.ndarray | None = None

    @property
    def residuals(self) -> tuple[float, float, float]:
        return self.stationarity, self.feasibility, self.complementarity


def kkt_report(grad: np.ndarray, x: np.ndarray, mu: np.ndarray, nu: np.ndarray, G, h, E, d) -> tuple[float, float, float]:
    """Recompute stationarity, feasibility and complementarity norms from scratch."""
    stat = grad - G.T @ mu - E.T @ nu
    slack = h - G @ x
    feas = 0.0
    if slack.size:
        feas = max(feas, float(np.max(np.maximum(-slack, 0.0))))
    if d.size:
        feas = max(feas, float(np.max(np.abs(E @ x - d))))
    comp = float(np.max(np.abs(mu * slack))) if mu.size else 0.0
    return float(np.max(np.abs(stat))) if stat.size else 0.0, feas, comp


# --- strictly feasible starts -------------------------------------------------

@dataclass
class InteriorStart:
    """A point strictly inside the inequalities that are not forced tight.

    ``implicit`` flags inequality rows that hold with equality at every feasible
    point; those are treated as equalities by the barrier. ``eq_rows`` lists the
    linearly independent rows of the stacked equality system ``[E; G[implicit]]``.
    """

    x: np.ndarray
    implicit: np.ndarray
    eq_rows: np.ndarray


def _lp_max_slack(G, h, E, d, rows: np.ndarray):
    """max sum(tau_k, k in rows) s.t. G x + tau <= h (tau only on ``rows``), 0 <= tau <= 1."""
    nx = G.shape[1]
    k = rows.size
    sparse = sp.issparse(G) or nx > SPARSE_DIM
    Gs = sp.csr_matrix(G)
    T = sp.csr_matrix((np.ones(k), (rows, np.arange(k))), shape=(G.shape[0], k))
    A_ub = sp.hstack([Gs, T], format="csr")
    A_eq = sp.hstack([sp.csr_matrix(E), sp.csr_matrix((E.shape[0], k))], format="csr") if d.size else None
    c = np.concatenate([np.zeros(nx), -np.ones(k)])
    bounds = [(None, None)] * nx + [(0.0, 1.0)] * k
    if not sparse:
        A_ub = A_ub.toarray()
        A_eq = A_eq.toarray() if A_eq is not None else None
    res = linprog(c, A_ub=A_ub, b_ub=h, A_eq=A_eq, b_eq=d if d.size else None,
                  bounds=bounds, method="highs-ds", options=HIGHS_OPTIONS)
    if res.status == 2:
        raise InfeasibleError("constraints admit no feasible point")
    if res.status != 0:
        raise SolverError(f"slack LP failed: {res.message}")
    return res.x[:nx], res.x[nx:]


def _lp_min_infeasibility(G, h, E, d):
    """Phase-1: max tau s.t. G x + tau <= h, E x = d, tau <= 1."""
    nx = G.shape[1]
    Gs = sp.csr_matrix(G)
    A_ub = sp.hstack([Gs, sp.csr_matrix(np.ones((G.shape[0], 1)))], format="csr")
    A_eq = sp.hstack([sp.csr_matrix(E), sp.csr_matrix((E.shape[0], 1))], format="csr") if d.size else None
    c = np.zeros(nx + 1)
    c[-1] = -1.0
    bounds = [(None, None)] * nx + [(None, 1.0)]
    res = linprog(c, A_ub=A_ub, b_ub=h, A_eq=A_eq, b_eq=d if d.size else None,
                  bounds=bounds, method="highs-ds", options=HIGHS_OPTIONS)
    if res.status == 2:
        raise InfeasibleError("equality constraints are inconsistent")
    if res.status != 0:
        raise SolverError(f"phase-1 LP failed: {res.message}")
    return res.x[:nx], float(res.x[-1])


def find_interior(program: SmoothProgram) -> InteriorStart:
    """Phase-1 plus detection of inequality rows that can never be slack."""
    G, h, E, d = program.G, program.h, program.E, program.d
    nineq = h.shape[0]
    implicit = np.zeros(nineq, dtype=bool)
    if program.x0 is not None:
        x0 = np.asarray(program.x0, dtype=float)
        ok_eq = not d.size or np.max(np.abs(E @ x0 - d)) <= 1e-12 * (1 + np.max(np.abs(d)))
        if ok_eq and (nineq == 0 or np.min(h - G @ x0) > 0) and np.isfinite(program.oracle(x0)[0]):
            return _finish_start(program, x0, implicit)
    if nineq == 0:
        if d.size:
            x = np.linalg.lstsq(_dense(E), d, rcond=None)[0]
        else:
            x = np.zeros(program.dim)
        return _finish_start(program, x, implicit)
    x, tau = _lp_min_infeasibility(G, h, E, d)
    if tau < -PHASE1_TOL:
        raise InfeasibleError(f"phase-1 optimum {-tau:.3e} > {PHASE1_TOL}")
    if tau > PHASE1_TOL:
        return _finish_start(program, x, implicit)
    # Empty interior: peel off rows that admit positive slack somewhere.
    remaining = np.arange(nineq)
    points = []
    while remaining.size:
        xk, tk = _lp_max_slack(G, h, E, d, remaining)
        slackened = tk > PHASE1_TOL
        if not np.any(slackened):
            break
        points.append(xk)
        remaining = remaining[~slackened]
    implicit[remaining] = True
    x = np.mean(points, axis=0) if points else x
    log.debug("interior search: %d of %d inequality rows are implicit equalities", remaining.size, nineq)
    return _finish_start(program, x, implicit)


def _finish_start(program: SmoothProgram, x: np.ndarray, implicit: np.ndarray) -> InteriorStart:
    G, h, E, d = program.G, program.h, program.E, program.d
    stacked = _stacked_equalities(program, implicit)
    rows = np.arange(0)
    if stacked[0].shape[0]:
        S = _dense(stacked[0])
        # independent rows via pivoted QR of S^T
        _, R, piv = scipy.linalg.qr(S.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R)) if R.size else np.zeros(0)
        tol_r = max(S.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0) * 10
        rank = int(np.sum(diag > tol_r))
        rows = np.sort(piv[:rank])
        Se, de = S[rows], stacked[1][rows]
        resid = Se @ x - de
        if np.any(resid != 0):
            x = x - np.linalg.lstsq(Se, resid, rcond=None)[0]
    free = ~implicit
    if np.any(free):
        slack = h[free] - (G @ x)[free]
        if np.min(slack) <= 0:
            raise InfeasibleError("could not find a point strictly inside the inequalities")
    return InteriorStart(x=x, implicit=implicit, eq_rows=rows)


def _stacked_equalities(program: SmoothProgram, implicit: np.ndarray):
    G, h, E, d = program.G, program.h, program.E, program.d
    if not np.any(implicit):
        return E, d
    Gi = G[np.flatnonzero(implicit)] if sp.issparse(G) else G[implicit]
    if sp.issparse(E) or sp.issparse(Gi):
        return sp.vstack([sp.csr_matrix(E), sp.csr_matrix(Gi)], format="csr"), np.concatenate([d, h[implicit]])
    return np.vstack([E, Gi]), np.concatenate([d, h[implicit]])


# --- barrier method ---------------------------------------------------------------

def _solve_kkt(H, A, rhs1, rhs2, sparse: bool):
    """Solve [[H, A^T], [A, 0]] [dx; w] = [rhs1; rhs2] after symmetric diagonal scaling.

    Barrier Hessians mix entries of order 1 with entries of order t/slack^2, so the
    system is equilibrated by the Hessian diagonal before factorization.
    """
    n, p = H.shape[0], A.shape[0]
    diag = H.diagonal() if sparse else np.diag(H)
    scale = 1.0 / np.sqrt(np.maximum(np.abs(diag), 1e-300))
    scale = np.where(np.isfinite(scale), scale, 1.0)
    if sparse:
        S = sp.diags(scale)
        Hs = S @ H @ S
        As = A @ S if p else A
    else:
        Hs = H * np.outer(scale, scale)
        As = A * scale if p else A
    b = np.concatenate([rhs1 * scale, rhs2])
    for reg in (0.0, 1e-14, 1e-11, 1e-8):
        try:
            if sparse:
                Hr = Hs + reg * sp.identity(n, format="csr") if reg else Hs
                K = sp.bmat([[Hr, As.T], [As, None]], format="csc") if p else sp.csc_matrix(Hr)
                sol = spla.spsolve(K, b, permc_spec="MMD_AT_PLUS_A")
            else:
                Hr = Hs + reg * np.eye(n) if reg else Hs
                K = np.block([[Hr, As.T], [As, np.zeros((p, p))]]) if p else Hr
                sol = np.linalg.solve(K, b)
        except (np.linalg.LinAlgError, RuntimeError):
            continue
        if np.all(np.isfinite(sol)):
            return sol[:n] * scale, sol[n:]
    if not sparse:
        K = np.block([[Hs, As.T], [As, np.zeros((p, p))]]) if p else Hs
        sol = np.linalg.lstsq(K, b, rcond=None)[0]
        if np.all(np.isfinite(sol)):
            return sol[:n] * scale, sol[n:]
    raise SolverError("Newton system is singular")


class _BlockKkt:
    """Newton systems whose Hessian splits into equal diagonal blocks.

    Equality rows living inside one block are eliminated per block; the remaining
    coupling rows go through a small Schur complement.
    """

    def __init__(self, size: int, dim: int, Gf, E):
        self.size = size
        self.nb = dim // size
        Gc = sp.coo_matrix(Gf)
        self.g_block = Gc.row.copy()
        blk_of = Gc.col // size
        self.row_block = np.full(Gf.shape[0], -1)
        self.row_block[Gc.row] = blk_of
        self.g_local = np.zeros((Gf.shape[0], size))
        self.g_local[Gc.row, Gc.col % size] = Gc.data
        # inequality rows must stay inside one block
        self.ok = bool(np.all(self.row_block[Gc.row] == blk_of))
        Ed = _dense(E)
        self.p = Ed.shape[0]
        nzb = [np.unique(np.flatnonzero(r) // size) for r in Ed]
        local = np.array([b.size == 1 for b in nzb], dtype=bool)
        self.coupling = np.flatnonzero(~local)
        self.Ac = Ed[self.coupling].reshape(self.coupling.size, self.nb, size)
        owner = np.array([b[0] if b.size == 1 else -1 for b in nzb], dtype=int)
        # group blocks by how many local rows they carry, for batched solves
        self.groups = []
        counts = np.bincount(owner[local], minlength=self.nb) if local.any() else np.zeros(self.nb, int)
        for c in np.unique(counts):
            blocks = np.flatnonzero(counts == c)
            rows = np.zeros((blocks.size, c), dtype=int)
            for k, b in enumerate(blocks):
                rows[k] = np.flatnonzero(owner == b)
            A = Ed[rows.ravel()].reshape(blocks.size, c, self.nb, size)[np.arange(blocks.size), :, blocks, :] \
                if c else np.zeros((blocks.size, 0, size))
            self.groups.append((blocks, rows, A))

    def hessian_blocks(self, H, inv2, t):
        m = self.size
        Hc = sp.coo_matrix(H)
        if np.any(Hc.row // m != Hc.col // m):
            return None
        Hb = np.zeros((self.nb, m, m))
        np.add.at(Hb, (Hc.row // m, Hc.row % m, Hc.col % m), -t * Hc.data)
        if inv2.size:
            gl = self.g_local
            np.add.at(Hb, self.row_block, inv2[:, None, None] * gl[:, :, None] * gl[:, None, :])
        return Hb

    def solve(self, Hb, rhs1, rhs2, E, refine: int = 2):
        dx, w = self._solve_once(Hb, rhs1, rhs2)
        for _ in range(refine):
            # iterative refinement against the full system
            r1 = rhs1 - np.einsum("bij,bj->bi", Hb, dx.reshape(self.nb, self.size)).ravel() - E.T @ w
            r2 = rhs2 - E @ dx
            ddx, dw = self._solve_once(Hb, r1, r2)
            dx, w = dx + ddx, w + dw
        return dx, w

    def _solve_once(self, Hb, rhs1, rhs2):
        m, nb = self.size, self.nb
        k = self.coupling.size
        diag = np.abs(np.einsum("bii->bi", Hb))
        scale = 1.0 / np.sqrt(np.maximum(diag, 1e-300))
        Hs = Hb * scale[:, :, None] * scale[:, None, :]
        r1 = (rhs1.reshape(nb, m) * scale)
        Ac = self.Ac * scale[None, :, :]
        dx0 = np.zeros((nb, m))
        Z = np.zeros((nb, m, k))
        w = np.zeros(self.p)
        wparts = []
        for blocks, rows, A in self.groups:
            c = rows.shape[1]
            As = A * scale[blocks][:, None, :]
            K = np.zeros((blocks.size, m + c, m + c))
            K[:, :m, :m] = Hs[blocks]
            K[:, :m, m:] = np.transpose(As, (0, 2, 1))
            K[:, m:, :m] = As
            R = np.zeros((blocks.size, m + c, 1 + k))
            R[:, :m, 0] = r1[blocks]
            R[:, m:, 0] = rhs2[rows]
            R[:, :m, 1:] = np.transpose(Ac[:, blocks, :], (1, 2, 0))
            sol = np.linalg.solve(K, R)
            dx0[blocks] = sol[:, :m, 0]
            Z[blocks] = sol[:, :m, 1:]
            wparts.append((rows, sol[:, m:, 0], sol[:, m:, 1:]))
        if k:
            S = np.einsum("kbi,bil->kl", Ac, Z)
            rc = np.einsum("kbi,bi->k", Ac, dx0) - rhs2[self.coupling]
            wc = np.linalg.solve(S, rc)
            dx = dx0 - Z @ wc
            w[self.coupling] = wc
        else:
            wc = np.zeros(0)
            dx = dx0
        for rows, w0, wz in wparts:
            if rows.shape[1]:
                w[rows] = w0 - wz @ wc if k else w0
        return (dx * scale).ravel(), w


def barrier_solve(program: SmoothProgram, tol: float = 1e-8, *, start: InteriorStart | None = None,
                  dual_target: tuple | None = None, max_outer: int = 40, max_newton: int = 200) -> KktSolution:
    """Log-barrier path following with equality-constrained Newton centering.

    ``start`` may carry a precomputed interior point (reused across solves over the
    same feasible set). ``dual_target = (C, c)`` picks, among optimal multipliers of
    rows that are forced tight, the ones minimizing ``||C mu - c||``; by default the
    minimum-norm multipliers are used.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    sparse = program.sparse
    if start is None:
        start = find_interior(program)
    G = _as_mode(program.G, sparse)
    h = program.h
    implicit = start.implicit
    free = ~implicit
    Gf = G[np.flatnonzero(free)] if sparse else G[free]
    hf = h[free]
    Es, ds = _stacked_equalities(program, implicit)
    Ee = _as_mode(Es, sparse)
    Ee = Ee[start.eq_rows] if Ee.shape[0] else Ee
    de = ds[start.eq_rows] if ds.size else ds

    x = start.x.copy()
    if not np.isfinite(program.oracle(x)[0]):
        raise SolverError("starting point lies outside the objective's domain; supply x0")
    t = T_INIT
    history = []
    total_newton = 0
    oracle = program.oracle

    def phi(xv, tt):
        s = hf - Gf @ xv
        if s.size and np.min(s) <= 0:
            return np.inf, None
        f = oracle(xv)[0]
        if not np.isfinite(f):
            return np.inf, None
        return -tt * f - np.sum(np.log(s)), f

    blocks = None
    if program.block and program.dim % program.block == 0:
        blocks = _BlockKkt(program.block, program.dim, Gf, Ee if Ee.shape[0] else np.zeros((0, program.dim)))
        if not blocks.ok:
            blocks = None

    w = np.zeros(Ee.shape[0])
    for outer in range(max_outer):
        polish = 0
        for it in range(max_newton):
            f, g, H = oracle(x)
            if not np.isfinite(f):
                raise SolverError("iterate left the objective domain")
            s = hf - Gf @ x
            inv = 1.0 / s
            grad = -t * g + Gf.T @ inv
            Hb = blocks.hessian_blocks(H, inv ** 2, t) if blocks is not None else None
            dx = None
            if Hb is not None:
                try:
                    dx, w = blocks.solve(Hb, -grad, np.zeros(Ee.shape[0]), Ee)
                except np.linalg.LinAlgError:
                    dx = None
                if dx is not None and not np.all(np.isfinite(dx)):
                    dx = None
            if dx is None:
                if sparse:
                    Hm = sp.csr_matrix(H) if not sp.issparse(H) else H
                    Hphi = -t * Hm + Gf.T @ sp.diags(inv ** 2) @ Gf
                else:
                    Hm = H.toarray() if sp.issparse(H) else H
                    Hphi = -t * Hm + (Gf.T * inv ** 2) @ Gf
                # the start satisfies the equalities, so steps stay in their null space
                dx, w = _solve_kkt(Hphi, Ee, -grad, np.zeros(Ee.shape[0]), sparse)
            total_newton += 1
            dec = float(-grad @ dx)
            if np.max(np.abs(dx), initial=0.0) <= 1e-14 * max(1.0, float(np.max(np.abs(x), initial=0.0))):
                # the step is below rounding; the decrement is noise at this t
                break
            phi0 = -t * f - np.sum(np.log(s))
            # below this level, changes in phi are rounding noise
            noise = 64 * np.finfo(float).eps * (abs(t * f) + float(np.sum(np.abs(np.log(s)))))
            step = 1.0
            Gdx = Gf @ dx
            pos = Gdx > 0
            if np.any(pos):
                step = min(1.0, 0.99 * float(np.min(s[pos] / Gdx[pos])))
            if dec / 2.0 <= max(NEWTON_TOL, noise):
                # the decrement alone under-reports the gradient when t is large
                Hdx = np.einsum("bij,bj->bi", Hb, dx.reshape(Hb.shape[:2])).ravel() if Hb is not None else Hphi @ dx
                dual_res = float(np.max(np.abs(Hdx), initial=0.0)) / t
                polish += 1
                if dual_res <= 0.1 * tol or polish > 3:
                    break
                # inside the quadratic region: take the Newton step without a line search,
                # only shortening it if rounding would put a slack at zero
                while step >= 1e-16 and not np.isfinite(phi(x + step * dx, t)[0]):
                    step *= BACKTRACK
                if step < 1e-16:
                    break
                x = x + step * dx
                continue
            slope = float(grad @ dx)
            while True:
                val, _ = phi(x + step * dx, t)
                if val <= phi0 + ARMIJO * step * slope or (dec <= 1e3 * noise and val <= phi0 + noise):
                    break
                step *= BACKTRACK
                if step < 1e-16:
                    break
            if step < 1e-16:
                # no progress possible: accept the current point as centred
                break
            x = x + step * dx
            if np.max(np.abs(x)) > UNBOUNDED_NORM:
                raise UnboundedError("objective increases without bound along a feasible ray")
        else:
            raise MaxIterationsError(f"Newton centering did not converge at t={t:g}")
        fval = oracle(x)[0]
        if fval > 1e15:
            raise UnboundedError("objective value diverges")
        history.append(float(fval))
        if 1.0 / t <= tol:
            break
        t *= T_FACTOR
    else:
        raise MaxIterationsError("barrier parameter did not reach the target tolerance")

    return _recover_duals(program, start, x, t, w, history, total_newton, dual_target, sparse)


def _recover_duals(program, start, x, t, w, history, iters, dual_target, sparse):
    G, h, E, d = program.G, program.h, program.E, program.d
    implicit = start.implicit
    free = ~implicit
    nineq = h.shape[0]
    f, g, _ = program.oracle(x)
    mu = np.zeros(nineq)
    slack = h - G @ x
    mu[free] = 1.0 / (t * slack[free])
    # multipliers for the independent stacked equality rows, solved at the final point
    nE = d.shape[0]
    Es, _ = _stacked_equalities(program, implicit)
    full = np.zeros(Es.shape[0])
    if Es.shape[0]:
        Ee = _dense(Es)[start.eq_rows]
        full[start.eq_rows] = np.linalg.lstsq(Ee.T, g - G.T @ mu, rcond=None)[0]
    nu = full[:nE]
    mu[implicit] = full[nE:]
    if np.any(implicit) or dual_target is not None:
        picked = _select_duals(program, g, slack, mu, implicit, dual_target)
        if picked is not None:
            nu, mu = picked
    mu = np.maximum(mu, 0.0)
    stat, feas, comp = kkt_report(g, x, mu, nu, G, h, E, d)
    if stat > 0 and not np.any(implicit) and dual_target is None:
        # 1/(t s) loses digits once the slack is near rounding level; apply the
        # minimum-norm correction on the active rows that zeroes the stationarity gap
        act = np.flatnonzero(slack <= mu)
        A = np.hstack([_dense(E).T, _dense(G)[act].T]) if nE else _dense(G)[act].T
        if A.shape[1]:
            gap = g - G.T @ mu - (E.T @ nu if nE else 0.0)
            delta = np.linalg.lstsq(A, gap, rcond=None)[0]
            nu2 = nu + delta[:nE]
            mu2 = mu.copy()
            mu2[act] = np.maximum(mu[act] + delta[nE:], 0.0)
            stat2, feas2, comp2 = kkt_report(g, x, mu2, nu2, G, h, E, d)
            if stat2 < stat and comp2 <= max(comp, 1e-300) * 10:
                mu, nu, stat, comp = mu2, nu2, stat2, comp2
    return KktSolution(x=x, mu=mu, nu=nu, objective=float(f), stationarity=stat, feasibility=feas,
                       complementarity=comp, t=t, iterations=iters, history=history, implicit=implicit)


def _select_duals(program, g, slack, mu, implicit, dual_target):
    """Choose multipliers on the optimal dual face.

    Rows that are tight at the solution (forced equalities, or slack below their
    barrier multiplier) get free nonnegative multipliers; an LP then picks the face
    point minimizing ``||C mu - c||_1`` (or the total multiplier on forced rows when
    no target is given). Returns None if the LP fails, keeping the barrier values.
    """
    G, E = program.G, program.E
    nE = program.d.shape[0]
    active = implicit | (slack <= mu)
    act = np.flatnonzero(active)
    fixed = np.flatnonzero(~active)
    Gs = sp.csr_matrix(G)
    rhs = g - Gs[fixed].T @ mu[fixed]
    blocks = [sp.csr_matrix(E).T, Gs[act].T]
    na = act.size
    bounds = [(None, None)] * nE + [(0.0, None)] * na
    if dual_target is not None:
        C, c = dual_target
        C = sp.csr_matrix(C)
        k = C.shape[0]
        ctarget = np.asarray(c, dtype=float) - C[:, fixed] @ mu[fixed]
        top = sp.hstack(blocks + [sp.csr_matrix((program.dim, 2 * k))], format="csr")
        bottom = sp.hstack([sp.csr_matrix((k, nE)), C[:, act], -sp.identity(k), sp.identity(k)], format="csr")
        A_eq = sp.vstack([top, bottom], format="csr")
        b_eq = np.concatenate([rhs, ctarget])
        cost = np.concatenate([np.zeros(nE + na), np.ones(2 * k)])
        bounds += [(0.0, None)] * (2 * k)
    else:
        A_eq = sp.hstack(blocks, format="csr")
        b_eq = rhs
        cost = np.concatenate([np.zeros(nE), implicit[act].astype(float)])
    res = linprog(cost, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs-ds", options=HIGHS_OPTIONS)
    if res.status != 0:
        log.debug("dual selection LP failed (%s); keeping barrier multipliers", res.message)
        return None
    nu = res.x[:nE]
    out = mu.copy()
    out[act] = res.x[nE:nE + na]
    return nu, out


# --- LP ---------------------------------------------------------------------------

def lp_solve(c, G=None, h=None, E=None, d=None, *, lexicographic: bool = False) -> KktSolution:
    """Maximize ``c @ x`` subject to ``G x <= h`` and ``E x = d`` (x is free).

    Backed by the HiGHS dual simplex so solutions are basic. With ``lexicographic``
    alternate optima are resolved to the lexicographically smallest optimal x.
    """
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    G, h = _rows(G, h if h is not None else np.zeros(0), n)
    E, d = _rows(E, d if d is not None else np.zeros(0), n)
    res = _highs(-c, G, h, E, d)
    x = res.x
    mu = -np.asarray(res.ineqlin.marginals) if h.size else np.zeros(0)
    nu = -np.asarray(res.eqlin.marginals) if d.size else np.zeros(0)
    mu = np.maximum(mu, 0.0)
    obj = float(c @ x)
    if lexicographic and n > 1:
        x = _lex_smallest(G, h, E, d, x, mu)
        obj = float(c @ x)
    stat, feas, comp = kkt_report(c, x, mu, nu, G, h, E, d)
    return KktSolution(x=x, mu=mu, nu=nu, objective=obj, stationarity=stat, feasibility=feas,
                       complementarity=comp, t=np.inf)


def _highs(cmin, G, h, E, d):
    res = linprog(cmin, A_ub=G if h.size else None, b_ub=h if h.size else None,
                  A_eq=E if d.size else None, b_eq=d if d.size else None,
                  bounds=(None, None), method="highs-ds", options=HIGHS_OPTIONS)
    if res.status == 2:
        raise InfeasibleError("LP is infeasible")
    if res.status == 3:
        raise UnboundedError("LP is unbounded")
    if res.status != 0:
        raise SolverError(f"LP solve failed: {res.message}")
    return res


def _lex_smallest(G, h, E, d, x, mu):
    """Lexicographically smallest point of the optimal face.

    The face is cut out exactly by complementary slackness with the optimal duals:
    rows with a positive multiplier become equalities.
    """
    n = x.shape[0]
    Gd, Ed = _dense(G), _dense(E)
    tight = mu > 1e-9
    rows = [Ed, Gd[tight]]
    rhs = [d, h[tight]]
    Gl, hl = Gd[~tight], h[~tight]
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        Ek, dk = np.vstack(rows), np.concatenate(rhs)
        try:
            res = _highs(e, Gl, hl, Ek, dk)
        except SolverError:
            break
        x = res.x
        rows.append(e[None, :])
        rhs.append(np.array([x[k]]))
    return x


# --- derivative checking & spectral radius ---------------------------------------

@dataclass(frozen=True)
class DerivativeCheck:
    gradient_error: float
    hessian_error: float

    @property
    def worst(self) -> float:
        return max(self.gradient_error, self.hessian_error)


def finite_difference_check(oracle: Oracle, x, h: float = 1e-5) -> DerivativeCheck:
    """Compare an oracle's gradient and Hessian with central differences.

    Errors are entrywise ``|fd - analytic| / max(1, |analytic|)``. Besides ``h``
    the steps ``10h`` and ``100h`` are tried where the oracle is defined, and each
    entry keeps its smallest error: rounding dominates small steps on nearly
    linear functions, truncation dominates large steps on curved ones.
    """
    x = np.asarray(x, dtype=float)
    if h <= 0:
        raise ValueError("step must be positive")
    _, g0, H0 = oracle(x)
    g0 = np.asarray(g0, dtype=float)
    H0 = _dense(H0) if H0 is not None else None
    n = x.size
    g_err = np.full(n, np.inf)
    H_err = np.full((n, n), np.inf)
    for scale in (1.0, 10.0, 100.0):
        step = h * scale
        for k in range(n):
            e = np.zeros(n)
            e[k] = step
            fp, gp, _ = oracle(x + e)
            fm, gm, _ = oracle(x - e)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                if scale == 1.0:
                    raise ValueError(f"oracle undefined at probe points along coordinate {k}")
                continue
            g_fd = (fp - fm) / (2 * step)
            g_err[k] = min(g_err[k], abs(g_fd - g0[k]) / max(1.0, abs(g0[k])))
            if H0 is not None:
                col = (np.asarray(gp) - np.asarray(gm)) / (2 * step)
                H_err[:, k] = np.minimum(H_err[:, k], np.abs(col - H0[:, k]) / np.maximum(1.0, np.abs(H0[:, k])))
    herr = float(np.max(H_err, initial=0.0)) if H0 is not None else 0.0
    return DerivativeCheck(float(np.max(g_err, initial=0.0)), herr)


def spectral_radius(M, tol: float = 1e-12, max_iter: int = 100000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    shape = M.shape
    if len(shape) != 2 or shape[0] != shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got shape {shape}")
    n = shape[0]
    if n == 0:
        return 0.0
    v = np.ones(n) + np.arange(n) / (10.0 * n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        wv = M @ v
        new = float(v @ wv)
        nrm = np.linalg.norm(wv)
        if nrm == 0:
            return 0.0
        v = wv / nrm
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return max(float(v @ (M @ v)), 0.0)
