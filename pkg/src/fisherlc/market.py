"""Market data model: utilities, per-agent linear constraints, agents and markets.

Also holds validation, JSON round-tripping, seeded random market generation and the
named scenario fixtures used throughout the test-suite.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

LINEAR = "linear"
COBB_DOUGLAS = "cobb_douglas"
CES = "ces"
UTILITY_KINDS = (LINEAR, COBB_DOUGLAS, CES)

EXPONENT_SUM_TOL = 1e-12


class MarketError(ValueError):
    """Raised for malformed market inputs."""


def _frozen(values, ndim: int = 1) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        arr = arr.reshape((-1,) if ndim == 1 else (-1, arr.shape[-1] if arr.size else 0))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class UtilitySpec:
    """Degree-one homogeneous concave utility.

    ``coeffs`` are the linear weights, Cobb-Douglas exponents or CES weights
    depending on ``kind``. ``rho`` is only read for CES.
    """

    kind: str
    coeffs: np.ndarray
    rho: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _frozen(self.coeffs))
        object.__setattr__(self, "rho", float(self.rho))

    @classmethod
    def linear(cls, coeffs) -> "UtilitySpec":
        return cls(LINEAR, coeffs)

    @classmethod
    def cobb_douglas(cls, exponents) -> "UtilitySpec":
        return cls(COBB_DOUGLAS, exponents)

    @classmethod
    def ces(cls, weights, rho: float) -> "UtilitySpec":
        return cls(CES, weights, rho)

    @property
    def dim(self) -> int:
        return self.coeffs.shape[0]

    def problems(self) -> list[str]:
        out = []
        if self.kind not in UTILITY_KINDS:
            return [f"unknown utility kind {self.kind!r}"]
        if not np.all(np.isfinite(self.coeffs)):
            out.append("utility parameters must be finite")
        elif np.any(self.coeffs < 0):
            out.append("utility parameters must be nonnegative")
        if self.kind == COBB_DOUGLAS and abs(self.coeffs.sum() - 1.0) > EXPONENT_SUM_TOL:
            out.append(f"Cobb-Douglas exponents sum to {self.coeffs.sum()!r}, not 1")
        if self.kind == CES and not (0.0 < self.rho <= 1.0):
            out.append(f"CES exponent rho={self.rho} outside (0, 1]")
        return out

    def __eq__(self, other):
        if not isinstance(other, UtilitySpec):
            return NotImplemented
        return (self.kind == other.kind and self.rho == other.rho
                and np.array_equal(self.coeffs, other.coeffs))

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind, "coeffs": self.coeffs.tolist()}
        if self.kind == CES:
            d["rho"] = self.rho
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UtilitySpec":
        kind = d["kind"].lower().replace("-", "_")
        if kind == "cobbdouglas":
            kind = COBB_DOUGLAS
        return cls(kind, d["coeffs"], d.get("rho", 1.0))


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Rows ``A x <= b`` restricting one agent's bundle."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        b = np.array(self.b, dtype=float).reshape(-1)
        if A.size == 0 and A.ndim != 2:
            A = A.reshape(0, 0)
        if A.ndim != 2 or A.shape[0] != b.shape[0]:
            raise MarketError(f"constraint matrix shape {A.shape} does not match rhs length {b.shape[0]}")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def empty(cls, m: int) -> "ConstraintSet":
        return cls(np.zeros((0, m)), np.zeros(0))

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[Sequence[float], float]], m: int) -> "ConstraintSet":
        if not rows:
            return cls.empty(m)
        return cls(np.array([r[0] for r in rows], dtype=float), np.array([r[1] for r in rows], dtype=float))

    @property
    def count(self) -> int:
        return self.b.shape[0]

    @property
    def homogeneous(self) -> bool:
        return bool(np.all(self.b == 0))

    def __eq__(self, other):
        if not isinstance(other, ConstraintSet):
            return NotImplemented
        return np.array_equal(self.A, other.A) and np.array_equal(self.b, other.b)


@dataclass(frozen=True, eq=False)
class Agent:
    budget: float
    utility: UtilitySpec
    constraints: ConstraintSet

    def __post_init__(self):
        object.__setattr__(self, "budget", float(self.budget))
        if self.constraints.A.shape[1] != self.utility.dim and self.constraints.count:
            raise MarketError("constraint width differs from utility dimension")
        if self.constraints.count == 0 and self.constraints.A.shape[1] != self.utility.dim:
            object.__setattr__(self, "constraints", ConstraintSet.empty(self.utility.dim))

    @property
    def m(self) -> int:
        return self.utility.dim

    def __eq__(self, other):
        if not isinstance(other, Agent):
            return NotImplemented
        return (self.budget == other.budget and self.utility == other.utility
                and self.constraints == other.constraints)

    def with_budget(self, budget: float) -> "Agent":
        return Agent(budget, self.utility, self.constraints)


@dataclass(frozen=True, eq=False)
class Market:
    agents: tuple[Agent, ...]
    capacities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "capacities", _frozen(self.capacities))

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def m(self) -> int:
        return self.capacities.shape[0]

    @property
    def budgets(self) -> np.ndarray:
        return np.array([a.budget for a in self.agents])

    @property
    def homogeneous(self) -> bool:
        return all(a.constraints.homogeneous for a in self.agents)

    @property
    def all_linear(self) -> bool:
        return all(a.utility.kind == LINEAR for a in self.agents)

    def __eq__(self, other):
        if not isinstance(other, Market):
            return NotImplemented
        return self.agents == other.agents and np.array_equal(self.capacities, other.capacities)

    def to_dict(self) -> dict:
        return {
            "capacities": self.capacities.tolist(),
            "agents": [
                {
                    "budget": a.budget,
                    "utility": a.utility.to_dict(),
                    "constraints": [
                        {"coeffs": row.tolist(), "rhs": float(rhs)}
                        for row, rhs in zip(a.constraints.A, a.constraints.b)
                    ],
                }
                for a in self.agents
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Market":
        caps = d["capacities"]
        m = len(caps)
        agents = []
        for ad in d["agents"]:
            rows = [(c["coeffs"], c["rhs"]) for c in ad.get("constraints", [])]
            agents.append(Agent(ad["budget"], UtilitySpec.from_dict(ad["utility"]),
                                ConstraintSet.from_rows(rows, m)))
        return cls(tuple(agents), caps)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Market":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class DualBundle:
    """Multipliers attached to an allocation: capacity prices, row duals, budget and
    nonnegativity duals (the last two are optional)."""

    p: np.ndarray
    r: tuple[np.ndarray, ...]
    y: np.ndarray | None = None
    s: np.ndarray | None = None


def validate_market(market: Market) -> list[str]:
    """Return a list of human-readable invariant violations (empty when valid)."""
    out: list[str] = []
    caps = market.capacities
    if market.n < 1:
        out.append("market needs at least one agent")
    if market.m < 1:
        out.append("market needs at least one good")
    for j, c in enumerate(caps):
        if not np.isfinite(c) or c <= 0:
            out.append(f"good {j}: capacity must be > 0 (got {c})")
    for i, a in enumerate(market.agents):
        tag = f"agent {i}"
        if a.utility.dim != market.m:
            out.append(f"{tag}: utility has dimension {a.utility.dim}, market has {market.m} goods")
        for msg in a.utility.problems():
            out.append(f"{tag}: {msg}")
        if not np.isfinite(a.budget):
            out.append(f"{tag}: budget must be finite")
        elif a.budget <= 0:
            out.append(f"{tag}: budget must be > 0 to take part in the market (got {a.budget})")
        if a.utility.dim == market.m and np.all(a.utility.coeffs == 0):
            out.append(f"{tag}: utility is zero for every good")
        cs = a.constraints
        if cs.count and cs.A.shape[1] != market.m:
            out.append(f"{tag}: constraint rows have width {cs.A.shape[1]}, expected {market.m}")
        for t in range(cs.count):
            if not np.all(np.isfinite(cs.A[t])) or not np.isfinite(cs.b[t]):
                out.append(f"{tag}, row {t}: non-finite coefficients")
            elif cs.b[t] < 0:
                out.append(f"{tag}, row {t}: right-hand side must be nonnegative (got {cs.b[t]})")
    return out


def require_valid(market: Market) -> None:
    problems = validate_market(market)
    if problems:
        raise MarketError("invalid market: " + "; ".join(problems))


def evaluate_utility(spec: UtilitySpec, x) -> tuple[float, np.ndarray]:
    """Utility value and gradient. Gradient entries at zero coordinates of
    Cobb-Douglas/CES utilities are ``+inf``."""
    x = np.asarray(x, dtype=float)
    if x.shape != spec.coeffs.shape:
        raise MarketError(f"bundle has shape {x.shape}, utility expects {spec.coeffs.shape}")
    c = spec.coeffs
    if spec.kind == LINEAR:
        return float(c @ x), c.copy()
    if spec.kind == COBB_DOUGLAS:
        active = c > 0
        if np.any(x[active] <= 0):
            grad = np.where(active & (x <= 0), np.inf, 0.0)
            return 0.0, grad
        val = float(np.exp(np.sum(c[active] * np.log(x[active]))))
        grad = np.zeros_like(x)
        grad[active] = c[active] * val / x[active]
        return val, grad
    if spec.kind == CES:
        rho = spec.rho
        if rho == 1.0:
            return float(c @ x), c.copy()
        with np.errstate(divide="ignore"):
            powers = np.where(c > 0, np.power(x, rho), 0.0)
        s = float(c @ powers)
        if s <= 0:
            return 0.0, np.where(c > 0, np.inf, 0.0)
        val = s ** (1.0 / rho)
        grad = np.zeros_like(x)
        pos = c > 0
        with np.errstate(divide="ignore"):
            grad[pos] = np.where(x[pos] > 0, c[pos] * np.power(x[pos], rho - 1.0) * s ** (1.0 / rho - 1.0), np.inf)
        return val, grad
    raise MarketError(f"unknown utility kind {spec.kind!r}")


def log_utility_derivs(spec: UtilitySpec, x: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, gradient and Hessian of ``log u(x)``; value is -inf outside the domain."""
    c = spec.coeffs
    m = c.shape[0]
    if spec.kind == LINEAR or (spec.kind == CES and spec.rho == 1.0):
        U = float(c @ x)
        if U <= 0:
            return -np.inf, np.zeros(m), np.zeros((m, m))
        g = c / U
        return float(np.log(U)), g, -np.outer(g, g)
    if spec.kind == COBB_DOUGLAS:
        pos = c > 0
        if np.any(x[pos] <= 0):
            return -np.inf, np.zeros(m), np.zeros((m, m))
        g = np.zeros(m)
        g[pos] = c[pos] / x[pos]
        h = np.zeros(m)
        h[pos] = -c[pos] / x[pos] ** 2
        return float(np.sum(c[pos] * np.log(x[pos]))), g, np.diag(h)
    if spec.kind == CES:
        rho = spec.rho
        pos = c > 0
        if np.any(x[pos] <= 0):
            return -np.inf, np.zeros(m), np.zeros((m, m))
        xp = x[pos]
        S = float(c[pos] @ xp ** rho)
        v = np.zeros(m)
        v[pos] = c[pos] * xp ** (rho - 1.0)
        g = v / S
        d = np.zeros(m)
        d[pos] = c[pos] * (rho - 1.0) * xp ** (rho - 2.0) / S
        H = np.diag(d) - rho * np.outer(g, g)
        return float(np.log(S) / rho), g, H
    raise MarketError(f"unknown utility kind {spec.kind!r}")


def _check_blocks(blocks: Sequence[Sequence[int]], m: int) -> list[list[int]]:
    seen: set[int] = set()
    out = []
    for blk in blocks:
        blk = [int(j) for j in blk]
        for j in blk:
            if j < 0 or j >= m:
                raise MarketError(f"knapsack block refers to good {j}, market has {m} goods")
            if j in seen:
                raise MarketError(f"knapsack blocks overlap on good {j}")
            seen.add(j)
        out.append(blk)
    return out


def random_market(seed: int, n: int, m: int, knapsack_blocks: Sequence[Sequence[int]] = (),
                  capacity: float = 1.0, utility: str = LINEAR) -> Market:
    """Seeded random market: Uniform[0,1] budgets and utility weights, identical
    capacities, one unit knapsack row per block for every agent.

    Goods are 0-indexed. Cobb-Douglas exponents are the same draws normalized per agent.
    """
    if capacity <= 0:
        raise MarketError("capacity must be > 0")
    blocks = _check_blocks(knapsack_blocks, m)
    rng = np.random.default_rng(seed)
    budgets = rng.uniform(0.0, 1.0, size=n)
    weights = rng.uniform(0.0, 1.0, size=(n, m))
    A = np.zeros((len(blocks), m))
    for t, blk in enumerate(blocks):
        A[t, blk] = 1.0
    rows = ConstraintSet(A, np.ones(len(blocks)))
    agents = []
    for i in range(n):
        if utility == LINEAR:
            spec = UtilitySpec.linear(weights[i])
        elif utility == COBB_DOUGLAS:
            spec = UtilitySpec.cobb_douglas(weights[i] / weights[i].sum())
        else:
            raise MarketError(f"random markets support linear or cobb_douglas utilities, not {utility!r}")
        agents.append(Agent(budgets[i], spec, rows))
    return Market(tuple(agents), np.full(m, float(capacity)))


# --- existence conditions -------------------------------------------------------

@dataclass(frozen=True)
class ExistenceConditions:
    cond_i: bool
    cond_ii: bool
    unrestricted_buyer: dict[int, int]   # good -> agent able to buy any amount of it
    free_good: dict[int, int]            # agent -> good outside all of its rows


def check_existence_conditions(market: Market) -> ExistenceConditions:
    buyer: dict[int, int] = {}
    free: dict[int, int] = {}
    for i, a in enumerate(market.agents):
        u = a.utility.coeffs
        untouched = ~np.any(a.constraints.A != 0, axis=0) if a.constraints.count else np.ones(market.m, bool)
        for j in range(market.m):
            if u[j] > 0 and untouched[j]:
                buyer.setdefault(j, i)
                free.setdefault(i, j)
    return ExistenceConditions(
        cond_i=len(buyer) == market.m,
        cond_ii=len(free) == market.n,
        unrestricted_buyer=buyer,
        free_good=free,
    )


# --- scenario fixtures ----------------------------------------------------------

@dataclass(frozen=True)
class ScenarioExpectation:
    name: str
    description: str
    equilibrium_exists: bool | None = None
    equilibria: tuple[np.ndarray, ...] = ()
    non_equilibria: tuple[np.ndarray, ...] = ()
    allocations: tuple[np.ndarray, ...] = ()     # parallel to ``equilibria``
    probe_prices: tuple[np.ndarray, ...] = ()    # prices for single-agent demand examples
    bundles: tuple[np.ndarray, ...] = ()         # expected bundles at probe_prices
    notes: dict = field(default_factory=dict)


def _agent(w, u, rows=(), m=None):
    m = len(u) if m is None else m
    return Agent(w, UtilitySpec.linear(u), ConstraintSet.from_rows(list(rows), m))


def _frac(a, b) -> float:
    return float(Fraction(a, b))


def nonconvex_prices(eta: float) -> np.ndarray:
    d = 12 * eta ** 2 + 1
    return np.array([2 + (2 * eta - 1) / d, 2 - 4 * eta / d, 2 + (2 * eta + 1) / d, 1.0])


def nonconvex_allocation(eta: float) -> np.ndarray:
    return np.array([
        [0.5 + eta, 0, 0.5 - eta, 0],
        [0.5 - eta, 0.5 + eta, 0, 0],
        [0, 0.5 - eta, 0.5 + eta, 0],
        [0, 0, 0, 1],
    ], dtype=float)


def _scenario_nonexist_homog():
    agents = (
        _agent(1, [1, 1], [([1, -1], 0)]),
        _agent(1, [1, 1], [([2, -1], 0)]),
    )
    return Market(agents, [1, 1]), ScenarioExpectation(
        "nonexist-homog", "two buyers with homogeneous proportionality rows; no equilibrium",
        equilibrium_exists=False, notes={"short_good": 0})


def _scenario_nonexist_knapsack():
    agents = (
        _agent(15, [200, 0.1], [([1, 1], 1)]),
        _agent(5, [100, 1.1], [([1, 1], 1)]),
    )
    return Market(agents, [1.5, 0.5]), ScenarioExpectation(
        "nonexist-knapsack", "two buyers sharing a unit knapsack over both goods; no equilibrium",
        equilibrium_exists=False)


def _scenario_negative_price():
    rows = [([1, 1, 0], 1)]
    agents = (_agent(10, [1, 2, 11], rows), _agent(0.5, [1, 10, 1], rows))
    return Market(agents, [1, 1, 1]), ScenarioExpectation(
        "negative-price", "has an equilibrium price vector with a negative entry",
        equilibrium_exists=True,
        equilibria=(np.array([-1.0, 0.5, 11.0]),),
        allocations=(np.array([[1.0, 0, 1], [0, 1, 0]]),),
        notes={"fixed_point_lambda": [2.0, 7.0 / 6.0]})


def _scenario_nonconvex():
    rows = [([1, 1, 1, 0], 1)]
    eps = 1e-4
    agents = (
        _agent(2, [2, eps, 4, eps], rows),
        _agent(1.5, [1, 2, eps, eps], rows),
        _agent(2.5, [eps, 3, 4, eps], rows),
        _agent(1, [eps, eps, eps, 1], rows),
    )
    lo = np.array([_frac(46, 49), _frac(106, 49), _frac(142, 49), 1.0])
    mid = np.array([_frac(95, 98), _frac(204, 98), _frac(289, 98), 1.0])
    return Market(agents, [1, 1, 1, 1]), ScenarioExpectation(
        "nonconvex", "equilibrium price set is not convex",
        equilibrium_exists=True,
        equilibria=(nonconvex_prices(0.0), lo),
        allocations=(nonconvex_allocation(0.0), nonconvex_allocation(-1 / 24)),
        non_equilibria=(mid,),
        notes={"midpoint_good1_demand": _frac(93, 194) + _frac(57, 109),
               "midpoint_x11": _frac(93, 194), "midpoint_x21": _frac(57, 109)})


def _scenario_giffen():
    agents = (_agent(1, [1, 2], [([1, 1], 1)]),)
    return Market(agents, [1, 1]), ScenarioExpectation(
        "giffen", "raising the price of good 1 raises its demand",
        probe_prices=(np.array([0.5, 3.0]), np.array([1.0, 3.0])),
        bundles=(np.array([0.8, 0.2]), np.array([1.0, 0.0])),
        notes={"good": 0, "compensated_budget": 1.4})


_VP_U = [1, 2, 3, 4, 5, 6]
_VP_P = np.array([0.1, 0.4, 0.7, 1.2, 1.7, 2.4])


def _scenario_vp1():
    rows = [([1, 0, 1, 0, 1, 0], 1), ([0, 1, 0, 1, 0, 1], 1)]
    agents = (_agent(2.4, _VP_U, rows),)
    return Market(agents, np.ones(6)), ScenarioExpectation(
        "vp-example-1", "greedy over two knapsacks; capacities are placeholders",
        probe_prices=(_VP_P,), bundles=(np.array([0, 0, 0.5, 1, 0.5, 0]),),
        notes={"slopes": {"0": [0.1, 0.3, 0.5], "1": [0.2, 0.4, 0.6]}})


def _scenario_vp2():
    rows = [([1, 0, 1, 0, 0, 0], 1), ([0, 1, 0, 1, 0, 1], 1)]
    agents = (_agent(4.5, _VP_U, rows),)
    return Market(agents, np.ones(6)), ScenarioExpectation(
        "vp-example-2", "greedy with an unconstrained good; capacities are placeholders",
        probe_prices=(_VP_P,), bundles=(np.array([0, 1, 1, 0, 2, 0]),),
        notes={"unconstrained_theta": 0.34})


SCENARIOS = {
    "nonexist-homog": _scenario_nonexist_homog,
    "nonexist-knapsack": _scenario_nonexist_knapsack,
    "negative-price": _scenario_negative_price,
    "nonconvex": _scenario_nonconvex,
    "giffen": _scenario_giffen,
    "vp-example-1": _scenario_vp1,
    "vp-example-2": _scenario_vp2,
}


def load_scenario(name: str) -> tuple[Market, ScenarioExpectation]:
    try:
        return SCENARIOS[name]()
    except KeyError:
        raise MarketError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
