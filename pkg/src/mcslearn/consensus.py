"""Three-phase PBFT over a seeded discrete-event network.

The network is a single shared medium: transmissions are serialized in send
order, each occupying the medium for ``size / bandwidth`` seconds, then
propagating for ``base_latency + jitter``. A PrePrepare carries the block
once as a multicast frame; Prepare, Commit and Reply messages are pairwise
authenticated and therefore sent point-to-point.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import heapq
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .ledger import Block

HEADER_BYTES = 96
DIGEST_BYTES = 32
MAC_BYTES = 32
CONTROL_BYTES = HEADER_BYTES + DIGEST_BYTES + MAC_BYTES


class Phase(enum.IntEnum):
    PRE_PREPARE = 0
    PREPARE = 1
    COMMIT = 2
    REPLY = 3


@dataclass(frozen=True)
class ConsensusConfig:
    n: int
    f: int
    reply_quorum: int | None = None
    phase_quorum: int | None = None
    view: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.f < 0:
            raise ValueError("f must be >= 0")
        if self.f > 0 and self.n < 3 * self.f + 1:
            raise ValueError(f"n={self.n} cannot tolerate f={self.f} (need n >= 3f+1)")
        if self.reply_quorum is None:
            object.__setattr__(self, "reply_quorum", self.f + 1)
        if self.phase_quorum is None:
            object.__setattr__(self, "phase_quorum", 2 * self.f + 1)
        if self.n > 1 and not 1 <= self.reply_quorum <= self.n - 1:
            raise ValueError("reply_quorum must lie in [1, n-1]")
        if self.phase_quorum > self.n:
            raise ValueError("phase_quorum must not exceed n")

    @classmethod
    def for_n(cls, n: int, **kw) -> "ConsensusConfig":
        return cls(n=n, f=(n - 1) // 3, **kw)


def elect_leader(view: int, n: int) -> int:
    if n < 1:
        raise ValueError("n must be >= 1")
    return view % n


@dataclass(frozen=True)
class ConsensusMessage:
    phase: Phase
    view: int
    height: int
    digest: str
    sender: int
    size: int


@dataclass
class SimNetwork:
    base_latency: float = 0.01
    bandwidth: float = 1.25e6
    jitter: float = 0.1
    seed: int = 0
    clock: float = 0.0
    medium_free_at: float = field(default=0.0, repr=False)
    _seq: int = field(default=0, repr=False)

    def jitter_for(self, sender: int, receiver: int, seq: int) -> float:
        """Uniform in [0, jitter*base_latency], a pure function of the message identity."""
        h = hashlib.blake2b(f"{self.seed}:{sender}:{receiver}:{seq}".encode(), digest_size=8).digest()
        return self.jitter * self.base_latency * (int.from_bytes(h, "big") / 2.0**64)

    def transmit(self, now: float, sender: int, receivers: Sequence[int], size: int) -> tuple[int, list[float]]:
        """Occupy the medium once and return (sequence number, per-receiver delivery times)."""
        seq = self._seq
        self._seq += 1
        start = max(now, self.medium_free_at)
        done = start + size / self.bandwidth
        self.medium_free_at = done
        return seq, [done + self.base_latency + self.jitter_for(sender, r, seq) for r in receivers]


@dataclass(frozen=True)
class RoundResult:
    committed: bool
    elapsed: float
    messages: int
    leader: int
    digest: str
    committed_nodes: tuple[int, ...] = ()


def round_timeout(net: SimNetwork, max_payload: int) -> float:
    return 10.0 * (net.base_latency + max_payload / net.bandwidth)


def run_consensus_round(cfg: ConsensusConfig, net: SimNetwork, block: Block | None = None, *,
                        payload_bytes: int | None = None, faulty: Iterable[int] = (),
                        height: int | None = None) -> RoundResult:
    """Drive one PBFT instance from PrePrepare to ``reply_quorum`` Replies at the leader.

    ``faulty`` replicas are silent (crash model). The event queue is drained
    completely so ``messages`` counts every message sent; ``elapsed`` is the
    simulated time at which the leader saw the reply quorum.
    """
    n = cfg.n
    faulty = frozenset(faulty)
    if block is not None:
        digest, height = block.block_hash, block.height if height is None else height
        payload = block.size_bytes if payload_bytes is None else payload_bytes
    else:
        payload = int(payload_bytes or 0)
        height = 0 if height is None else height
        digest = hashlib.sha256(f"synthetic:{height}:{payload}".encode()).hexdigest()
    leader = elect_leader(cfg.view, n)
    t0 = net.clock
    net.medium_free_at = max(net.medium_free_at, t0)
    timeout = round_timeout(net, HEADER_BYTES + payload)

    events: list[tuple[float, int, int, int, ConsensusMessage]] = []
    sent = 0

    def send(now: float, sender: int, receivers: list[int], phase: Phase, size: int, multicast: bool) -> None:
        nonlocal sent
        msg = ConsensusMessage(phase, cfg.view, height, digest, sender, size)
        sent += len(receivers)
        if multicast:
            seq, times = net.transmit(now, sender, receivers, size)
            for r, t in zip(receivers, times):
                heapq.heappush(events, (t, sender, seq, r, msg))
        else:
            for r in receivers:
                seq, (t,) = net.transmit(now, sender, [r], size)
                heapq.heappush(events, (t, sender, seq, r, msg))

    others = {i: [j for j in range(n) if j != i] for i in range(n)}
    has_pp = [False] * n
    prepares = [set() for _ in range(n)]
    commits = [set() for _ in range(n)]
    sent_commit = [False] * n
    done = [False] * n
    replies: set[int] = set()
    quorum_at: float | None = None

    def after_prepare(i: int, now: float) -> None:
        if has_pp[i] and not sent_commit[i] and len(prepares[i]) >= cfg.phase_quorum:
            sent_commit[i] = True
            commits[i].add(i)
            send(now, i, others[i], Phase.COMMIT, CONTROL_BYTES, False)
            after_commit(i, now)

    def after_commit(i: int, now: float) -> None:
        if sent_commit[i] and not done[i] and len(commits[i]) >= cfg.phase_quorum:
            done[i] = True
            if i != leader:
                send(now, i, [leader], Phase.REPLY, CONTROL_BYTES, False)

    def start_prepare(i: int, now: float) -> None:
        has_pp[i] = True
        prepares[i].add(i)
        send(now, i, others[i], Phase.PREPARE, CONTROL_BYTES, False)
        after_prepare(i, now)

    if leader not in faulty:
        send(t0, leader, others[leader], Phase.PRE_PREPARE, HEADER_BYTES + payload, True)
        start_prepare(leader, t0)

    while events:
        now, _, _, i, msg = heapq.heappop(events)
        if i in faulty:
            continue
        if msg.phase is Phase.PRE_PREPARE:
            if not has_pp[i]:
                start_prepare(i, now)
        elif msg.phase is Phase.PREPARE:
            prepares[i].add(msg.sender)
            after_prepare(i, now)
        elif msg.phase is Phase.COMMIT:
            commits[i].add(msg.sender)
            after_commit(i, now)
        elif msg.phase is Phase.REPLY and i == leader:
            replies.add(msg.sender)
            if quorum_at is None and len(replies) >= cfg.reply_quorum:
                quorum_at = now

    if n == 1:
        quorum_at = t0 if leader not in faulty else None
    committed = quorum_at is not None and quorum_at - t0 <= timeout
    elapsed = (quorum_at - t0) if committed else timeout
    net.clock = t0 + elapsed
    return RoundResult(committed, elapsed, sent, leader, digest,
                       tuple(i for i in range(n) if done[i]))


def fault_free_message_count(n: int) -> int:
    return (n - 1) + 2 * n * (n - 1) + (n - 1)


class ConsensusEngine:
    """Commits successive blocks; the view advances with block height."""

    def __init__(self, n: int = 4, net: SimNetwork | None = None, f: int | None = None,
                 faulty_schedule: Callable[[int], Iterable[int]] | None = None,
                 names: Sequence[str] | None = None) -> None:
        if names is not None and len(names) != n:
            raise ValueError(f"need {n} node names, got {len(names)}")
        self.n = n
        self.names = tuple(names) if names is not None else None
        self.f = (n - 1) // 3 if f is None else f
        self.net = net or SimNetwork()
        self.faulty_schedule = faulty_schedule
        self.history: list[RoundResult] = []
        self.decided: dict[int, set[str]] = {}

    def node_name(self, index: int) -> str:
        return self.names[index] if self.names else f"node-{index}"

    def leader_for(self, height: int) -> str:
        return self.node_name(elect_leader(height, self.n))

    def commit(self, block: Block) -> bool:
        cfg = ConsensusConfig(self.n, self.f, view=block.height)
        faulty = self.faulty_schedule(block.height) if self.faulty_schedule else ()
        result = run_consensus_round(cfg, self.net, block, faulty=faulty)
        self.history.append(result)
        if result.committed:
            self.decided.setdefault(block.height, set()).add(result.digest)
        return result.committed

    __call__ = commit

    @property
    def elapsed_total(self) -> float:
        return sum(r.elapsed for r in self.history)


# ---------------------------------------------------------------------------
# Scaling measurements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingPoint:
    n: int
    servers: int
    payload_bytes: int

    @property
    def f(self) -> int:
        return (self.n - 1) // 3


SCALING_COLUMNS = ("n", "f", "servers", "payload_bytes", "elapsed_s", "messages")


def _measure_one(point: ScalingPoint, seed: int, net_kwargs: dict) -> dict:
    net = SimNetwork(seed=seed, **net_kwargs)
    res = run_consensus_round(ConsensusConfig.for_n(point.n), net, payload_bytes=point.payload_bytes)
    return {"n": point.n, "f": point.f, "servers": point.servers, "payload_bytes": point.payload_bytes,
            "elapsed_s": res.elapsed, "messages": res.messages, "committed": res.committed}


def measure_scaling(points: Sequence[ScalingPoint], seed: int = 0, workers: int = 1,
                    **net_kwargs) -> list[dict]:
    """One row per configuration, each on its own network with a derived seed."""
    if not points:
        return []
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(len(points))]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_measure_one, points, seeds, [net_kwargs] * len(points)))
    return [_measure_one(p, s, net_kwargs) for p, s in zip(points, seeds)]


def server_sweep(servers: Iterable[int], n: int = 10, bytes_per_server: int = 300_000) -> list[ScalingPoint]:
    return [ScalingPoint(n, k, k * bytes_per_server) for k in servers]


def node_sweep(ns: Iterable[int], servers: int = 10, bytes_per_server: int = 300_000) -> list[ScalingPoint]:
    return [ScalingPoint(n, servers, servers * bytes_per_server) for n in ns]


def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0


def growth_ratios(values: Sequence[float]) -> list[float]:
    return [b / a for a, b in zip(values, values[1:])]


def scaling_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCALING_COLUMNS)
    for r in rows:
        w.writerow([r["n"], r["f"], r["servers"], r["payload_bytes"], f"{r['elapsed_s']:.9f}", r["messages"]])
    return buf.getvalue()
