"""Message-passing simulation of the distributed price process.

A coordinator talks to worker threads over framed channels. Each worker owns a
fixed set of agents and answers every round with their bundles; the coordinator
fills indexed slots and runs the same aggregation step as :func:`adm.run_adm`, so
the two traces agree bit for bit.

Wire frames are a 4-byte big-endian length followed by a UTF-8 JSON object with a
``type`` tag. Floats survive the round trip exactly because JSON output uses
``repr``.
"""
from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from .adm import (ADMM, AMA, AdmConfig, AdmState, ConvergenceTrace, aggregate, check_variant,
                  initial_state, record, x_update)
from .kernels import UnboundedError
from .market import Agent, Market, evaluate_utility, require_valid

log = logging.getLogger(__name__)

FEAS_TOL = 1e-9
RECV_TIMEOUT = 60.0


# --- messages ------------------------------------------------------------------------

@dataclass(frozen=True)
class PriceAnnounce:
    round: int
    p: list


@dataclass(frozen=True)
class BaselineAnnounce:
    round: int
    agent_id: int
    y_i: list
    r_i: list | None = None      # row multipliers, non-homogeneous variant only
    p_i: list | None = None      # agent's own price vector when AMA keeps one per agent


@dataclass(frozen=True)
class DemandReport:
    round: int
    agent_id: int
    x_i: list


@dataclass(frozen=True)
class RebateNote:
    round: int
    agent_id: int
    amount: float


@dataclass(frozen=True)
class Terminate:
    reason: str


MESSAGE_TYPES = {cls.__name__: cls for cls in (PriceAnnounce, BaselineAnnounce, DemandReport, RebateNote, Terminate)}


def encode(msg) -> bytes:
    body = asdict(msg)
    body["type"] = type(msg).__name__
    data = json.dumps(body, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(data)) + data


def decode(frame: bytes):
    if len(frame) < 4:
        raise ValueError("frame shorter than its length prefix")
    (size,) = struct.unpack(">I", frame[:4])
    if len(frame) != 4 + size:
        raise ValueError(f"frame length {len(frame) - 4} does not match prefix {size}")
    body = json.loads(frame[4:].decode("utf-8"))
    kind = body.pop("type", None)
    if kind not in MESSAGE_TYPES:
        raise ValueError(f"unknown message type {kind!r}")
    return MESSAGE_TYPES[kind](**body)


# --- transport -------------------------------------------------------------------------

class ChannelClosed(Exception):
    pass


class QueueEnd:
    """One end of an in-process channel; frames are passed as encoded bytes."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._in, self._out = inbox, outbox

    def send(self, msg) -> None:
        self._out.put(encode(msg))

    def recv(self, timeout: float | None = RECV_TIMEOUT):
        try:
            frame = self._in.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message before timeout") from None
        if frame is None:
            raise ChannelClosed("peer closed the channel")
        return decode(frame)

    def close(self) -> None:
        self._out.put(None)


class SocketEnd:
    """One end of a loopback socket pair carrying the same frames."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._lock = threading.Lock()

    def send(self, msg) -> None:
        data = encode(msg)
        with self._lock:
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise ChannelClosed(str(exc)) from None

    def _read(self, k: int) -> bytes:
        buf = bytearray()
        while len(buf) < k:
            try:
                chunk = self._sock.recv(k - len(buf))
            except socket.timeout:
                raise TimeoutError("no message before timeout") from None
            except OSError as exc:
                raise ChannelClosed(str(exc)) from None
            if not chunk:
                raise ChannelClosed("peer closed the socket")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self, timeout: float | None = RECV_TIMEOUT):
        self._sock.settimeout(timeout)
        head = self._read(4)
        (size,) = struct.unpack(">I", head)
        return decode(head + self._read(size))

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def channel_pair(transport: str = "queue"):
    """Two connected ends: (coordinator side, worker side)."""
    if transport == "queue":
        a, b = queue.Queue(), queue.Queue()
        return QueueEnd(a, b), QueueEnd(b, a)
    if transport == "socket":
        s1, s2 = socket.socketpair()
        return SocketEnd(s1), SocketEnd(s2)
    raise ValueError("transport must be 'queue' or 'socket'")


# --- rebates ---------------------------------------------------------------------------

def _check_feasible(agent: Agent, x: np.ndarray, label: str) -> None:
    if x.shape != (agent.m,):
        raise ValueError(f"{label} has shape {x.shape}, expected ({agent.m},)")
    if np.any(x < -FEAS_TOL):
        raise ValueError(f"{label} has a negative entry")
    if agent.constraints.count and np.any(agent.constraints.A @ x > agent.constraints.b + FEAS_TOL):
        raise ValueError(f"{label} violates the agent's rows")


def rebate_amount(agent: Agent, p, y_i, beta: float, x_unperturbed, x_perturbed) -> float:
    """Compensation owed for choosing ``x_perturbed`` instead of the agent's own optimum.

    Both bundles are scored under the objective without the proximal term,
    ``w log u(x) - p.x``; ``y_i`` and ``beta`` only identify the perturbation and
    are shape-checked.
    """
    p = np.asarray(p, dtype=float)
    xu = np.asarray(x_unperturbed, dtype=float)
    xp = np.asarray(x_perturbed, dtype=float)
    if np.asarray(y_i).shape != (agent.m,) or not beta > 0:
        raise ValueError("y_i must match the number of goods and beta must be positive")
    _check_feasible(agent, xu, "x_unperturbed")
    _check_feasible(agent, xp, "x_perturbed")
    if np.array_equal(xu, xp):
        return 0.0

    def score(x):
        u, _ = evaluate_utility(agent.utility, np.maximum(x, 0.0))
        return agent.budget * np.log(u) - float(p @ x) if u > 0 else -np.inf

    with np.errstate(divide="ignore"):
        return float(score(xu) - score(xp))


# --- rounds ----------------------------------------------------------------------------

@dataclass
class RoundLog:
    round: int
    messages: list = field(default_factory=list)
    state: AdmState | None = None


@dataclass(frozen=True)
class Fault:
    """Kill ``worker`` when it receives the prices for ``round``."""
    round: int
    worker: int = 0


def _worker(market: Market, config: AdmConfig, agent_ids, end, fault: Fault | None, wid: int):
    caches = {i: {} for i in agent_ids}
    try:
        while True:
            msg = end.recv(timeout=None)
            if isinstance(msg, Terminate):
                return
            if not isinstance(msg, PriceAnnounce):
                raise RuntimeError(f"worker {wid} expected prices, got {type(msg).__name__}")
            k = msg.round
            if fault is not None and fault.worker == wid and fault.round == k:
                log.info("worker %d killed at round %d", wid, k)
                return
            p = np.array(msg.p, dtype=float)
            for _ in agent_ids:
                base = end.recv(timeout=None)
                if not isinstance(base, BaselineAnnounce) or base.round != k:
                    raise RuntimeError(f"worker {wid} got an out-of-round baseline")
                i = base.agent_id
                prices = p if base.p_i is None else np.array(base.p_i, dtype=float)
                r_i = None if base.r_i is None else np.array(base.r_i, dtype=float)
                try:
                    x = x_update(config.variant, market.agents[i], prices, np.array(base.y_i, dtype=float),
                                 r_i, config.beta, start_cache=caches[i])
                except UnboundedError as exc:
                    end.send(Terminate(f"unbounded: {exc}"))
                    return
                end.send(DemandReport(k, i, x.tolist()))
    except ChannelClosed:
        return
    except Exception as exc:  # surfaced to the coordinator
        try:
            end.send(Terminate(f"worker {wid} failed: {exc}"))
        except Exception:
            pass
    finally:
        end.close()


def _unperturbed_bundle(config: AdmConfig, agent: Agent, p, y_i):
    return x_update(AMA, agent, p, y_i, None, config.beta)


def run_distributed(market: Market, config: AdmConfig | None = None, worker_count: int = 1, *,
                    transport: str = "queue", rebates: bool = False, fault: Fault | None = None,
                    timeout: float = RECV_TIMEOUT) -> tuple[ConvergenceTrace, list[RoundLog]]:
    """Run the price process with agents spread over ``worker_count`` worker threads.

    The coordinator uses the same aggregation as :func:`adm.run_adm`, so with no
    fault the trace and final state match it exactly. ``rebates`` adds a
    :class:`RebateNote` per agent each round (ADMM only).
    """
    config = config or AdmConfig()
    require_valid(market)
    check_variant(market, config.variant)
    if worker_count < 1:
        raise ValueError("worker_count must be at least 1")
    n = market.n
    owners = [list(range(w, n, worker_count)) for w in range(worker_count)]
    owners = [ids for ids in owners if ids]
    ends, threads = [], []
    for wid, ids in enumerate(owners):
        mine, theirs = channel_pair(transport)
        t = threading.Thread(target=_worker, args=(market, config, ids, theirs, fault, wid), daemon=True)
        ends.append(mine)
        threads.append(t)
        t.start()
    owner_of = {i: w for w, ids in enumerate(owners) for i in ids}

    state = initial_state(market, config)
    trace = ConvergenceTrace(nonhomogeneous=config.variant == "ADMM_NH")
    logs: list[RoundLog] = []

    def stop(entry: RoundLog, reason: str):
        term = Terminate(reason)
        entry.messages.append(term)
        entry.state = state.copy()
        for e in ends:
            try:
                e.send(term)
            except Exception:
                pass

    try:
        for _ in range(config.max_iter):
            k = state.k + 1
            entry = RoundLog(k)
            logs.append(entry)
            announce = PriceAnnounce(k, state.p.tolist())
            entry.messages.append(announce)
            failure = None
            for w, ids in enumerate(owners):
                try:
                    ends[w].send(announce)
                    for i in ids:
                        p_i = None if state.p_agent is None else state.p_agent[i].tolist()
                        r_i = state.r[i].tolist() if config.variant == "ADMM_NH" else None
                        ends[w].send(BaselineAnnounce(k, i, state.y[i].tolist(), r_i, p_i))
                except ChannelClosed as exc:
                    failure = f"worker {w} lost in round {k}: {exc}"
                    break
            X = np.empty((n, market.m))
            filled = np.zeros(n, dtype=bool)
            pending = {w: len(ids) for w, ids in enumerate(owners)}
            while failure is None and not filled.all():
                for w in range(len(owners)):
                    if pending[w] == 0:
                        continue
                    try:
                        msg = ends[w].recv(timeout=timeout)
                    except (ChannelClosed, TimeoutError) as exc:
                        failure = f"worker {w} lost in round {k}: {exc}"
                        break
                    if isinstance(msg, Terminate):
                        failure = msg.reason
                        break
                    if not isinstance(msg, DemandReport) or msg.round != k or owner_of.get(msg.agent_id) != w:
                        failure = f"unexpected message from worker {w} in round {k}"
                        break
                    entry.messages.append(msg)
                    X[msg.agent_id] = msg.x_i
                    filled[msg.agent_id] = True
                    pending[w] -= 1
            if failure is not None:
                if failure.startswith("unbounded: "):
                    trace.diverged = True
                    trace.message = f"iteration {k}: {failure[len('unbounded: '):]}"
                else:
                    trace.message = failure
                log.info("distributed run stopped: %s", failure)
                stop(entry, failure)
                return trace, logs
            if rebates and config.variant == ADMM:
                for i, a in enumerate(market.agents):
                    try:
                        xu = _unperturbed_bundle(config, a, state.p, state.y[i])
                        amt = rebate_amount(a, state.p, state.y[i], config.beta, xu, X[i])
                    except (UnboundedError, ValueError) as exc:
                        log.debug("round %d: no rebate for agent %d (%s)", k, i, exc)
                        continue
                    entry.messages.append(RebateNote(k, i, amt))
            state, res = aggregate(market, config, state, X)
            record(trace, market, state, res)
            entry.state = state.copy()
            if not np.all(np.isfinite(state.p)):
                trace.diverged = True
                trace.message = "prices diverged"
                stop(entry, trace.message)
                return trace, logs
            if trace.max_residual() <= config.tol:
                trace.converged = True
                stop(entry, "converged")
                return trace, logs
        if logs:
            stop(logs[-1], "iteration budget exhausted")
        return trace, logs
    finally:
        for e in ends:
            try:
                e.close()
            except Exception:
                pass
        for t in threads:
            t.join(timeout=5.0)


def replay(market: Market, config: AdmConfig, logs: list[RoundLog]) -> AdmState:
    """Rebuild the coordinator state from the demand reports of every completed round."""
    state = initial_state(market, config)
    for entry in logs:
        reports = [m for m in entry.messages if isinstance(m, DemandReport)]
        if len(reports) < market.n:
            break
        X = np.empty((market.n, market.m))
        for msg in reports:
            X[msg.agent_id] = msg.x_i
        state, _ = aggregate(market, config, state, X)
    return state
