"""Payment settlement between the finalizing leader and the requestor.

States are ordered (cc, cd, dc, dd) with the leader's action first. The
leader conditions on the previous round's state; the requestor responds to
the leader's action in the current round.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .ledger import Ledger, LedgerError, TxKind, query_task_records

STATES = ("cc", "cd", "dc", "dd")


class SettlementError(Exception):
    pass


class InfeasibleStrategy(SettlementError):
    pass


class AllocationRefused(SettlementError):
    pass


@dataclass(frozen=True)
class PayoffMatrices:
    x: tuple[float, float, float, float] = (6.0, 3.0, 8.0, 5.0)
    y: tuple[float, float, float, float] = (6.0, 8.0, 3.0, 5.0)

    def __post_init__(self) -> None:
        x1, x2, x3, x4 = self.x
        y1, y2, y3, y4 = self.y
        if not x3 > x1 > x4 > x2:
            raise ValueError(f"leader payoffs must satisfy x3 > x1 > x4 > x2, got {self.x}")
        if not y2 > y1 > y4 > y3:
            raise ValueError(f"requestor payoffs must satisfy y2 > y1 > y4 > y3, got {self.y}")

    @property
    def xv(self) -> np.ndarray:
        return np.asarray(self.x, float)

    @property
    def yv(self) -> np.ndarray:
        return np.asarray(self.y, float)


@dataclass(frozen=True)
class LeaderStrategy:
    p: tuple[float, float, float, float]
    name: str = "custom"

    def __post_init__(self) -> None:
        if len(self.p) != 4 or any(not 0.0 <= v <= 1.0 for v in self.p):
            raise ValueError(f"leader strategy must be four probabilities, got {self.p}")


@dataclass(frozen=True)
class RequestorStrategy:
    q: tuple[float, float]

    def __post_init__(self) -> None:
        if len(self.q) != 2 or any(not 0.0 <= v <= 1.0 for v in self.q):
            raise ValueError(f"requestor strategy must be two probabilities, got {self.q}")


@dataclass(frozen=True)
class ZDParams:
    chi: float = 2.0
    gamma: float = 0.1
    # general linear form alpha*E_b + beta*E_r + gamma_general = 0
    alpha: float | None = None
    beta: float | None = None
    gamma_general: float | None = None

    def __post_init__(self) -> None:
        if self.chi < 1:
            raise ValueError("chi must be >= 1")
        if self.gamma == 0:
            raise ValueError("gamma must be non-zero")


def _zd_direction(chi: float, pay: PayoffMatrices) -> np.ndarray:
    return (pay.xv - pay.x[0]) - chi * (pay.yv - pay.y[0])


def feasible_gamma_interval(chi: float, pay: PayoffMatrices) -> tuple[float, float] | None:
    """Closed interval of gamma keeping every p_i in [0, 1], or None if only gamma=0 works."""
    d = _zd_direction(chi, pay)
    offset = np.array([1.0, 1.0, 0.0, 0.0])
    lo, hi = -np.inf, np.inf
    for o, di in zip(offset, d):
        if di == 0:
            continue
        # 0 <= o + gamma*di <= 1
        a, b = (-o) / di, (1 - o) / di
        lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
    if lo > hi or (lo == hi == 0):
        return None
    return float(lo) + 0.0, float(hi) + 0.0


def zd_strategy(zd: ZDParams, pay: PayoffMatrices) -> LeaderStrategy:
    """Leader strategy enforcing E_b - x1 = chi * (E_r - y1)."""
    p = np.array([1.0, 1.0, 0.0, 0.0]) + zd.gamma * _zd_direction(zd.chi, pay)
    bad = [i + 1 for i, v in enumerate(p) if not 0.0 <= v <= 1.0]
    if bad:
        interval = feasible_gamma_interval(zd.chi, pay)
        raise InfeasibleStrategy(
            f"gamma={zd.gamma} puts p{bad[0]}={p[bad[0] - 1]:g} outside [0, 1]; "
            f"feasible gamma interval for chi={zd.chi}: {interval}")
    return LeaderStrategy(tuple(float(v) for v in p), name=f"ZD(chi={zd.chi:g},gamma={zd.gamma:g})")


def general_zd_strategy(alpha: float, beta: float, gamma: float, pay: PayoffMatrices) -> LeaderStrategy:
    """Leader strategy with p~ = alpha*x + beta*y + gamma*1, enforcing alpha*E_b + beta*E_r + gamma = 0."""
    p = np.array([1.0, 1.0, 0.0, 0.0]) + alpha * pay.xv + beta * pay.yv + gamma
    bad = [i + 1 for i, v in enumerate(p) if not 0.0 <= v <= 1.0]
    if bad:
        raise InfeasibleStrategy(f"p{bad[0]}={p[bad[0] - 1]:g} outside [0, 1]")
    return LeaderStrategy(tuple(float(v) for v in p), name="ZD(general)")


def tft_strategy() -> LeaderStrategy:
    return LeaderStrategy((1.0, 0.0, 1.0, 0.0), name="TFT")


def wsls_strategy(pay: PayoffMatrices) -> LeaderStrategy:
    """Repeat the last action after a high payoff, switch after a low one.

    High means strictly above the midpoint of x1 and x4.
    """
    threshold = 0.5 * (pay.x[0] + pay.x[3])
    own_coop = (True, True, False, False)
    p = []
    for xi, cooperated in zip(pay.x, own_coop):
        stay = xi > threshold
        p.append(1.0 if stay == cooperated else 0.0)
    return LeaderStrategy(tuple(p), name="WSLS")


# ---------------------------------------------------------------------------
# Markov analysis
# ---------------------------------------------------------------------------


def transition_matrix(p: Sequence[float], q: Sequence[float]) -> np.ndarray:
    p = np.asarray(p, float)
    q1, q2 = q
    return np.column_stack([p * q1, p * (1 - q1), (1 - p) * q2, (1 - p) * (1 - q2)])


def _stationary_irreducible(m: np.ndarray) -> np.ndarray:
    k = m.shape[0]
    if k == 1:
        return np.ones(1)
    a = np.vstack([m.T - np.eye(k), np.ones(k)])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(a, b, rcond=None)[0]
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def limiting_distribution(m: np.ndarray, start: np.ndarray | None = None) -> np.ndarray:
    """Long-run state frequencies of the chain started from ``start`` (uniform by default).

    Reducible chains are split into closed communicating classes; the result
    mixes each class's stationary law by its absorption probability.
    """
    k = m.shape[0]
    start = np.full(k, 1.0 / k) if start is None else np.asarray(start, float)
    n_comp, labels = connected_components(m > 0, directed=True, connection="strong")
    if n_comp == 1:
        return _stationary_irreducible(m)
    closed = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        outside = np.setdiff1d(np.arange(k), members)
        if not np.any(m[np.ix_(members, outside)] > 0):
            closed.append(members)
    recurrent = np.concatenate(closed)
    transient = np.setdiff1d(np.arange(k), recurrent)
    # absorption probabilities B[i, c] from transient state i into closed class c
    if transient.size:
        qt = m[np.ix_(transient, transient)]
        r = np.column_stack([m[np.ix_(transient, cls)].sum(axis=1) for cls in closed])
        absorb = np.linalg.solve(np.eye(transient.size) - qt, r)
    pi = np.zeros(k)
    for c, cls in enumerate(closed):
        weight = start[cls].sum()
        if transient.size:
            weight += start[transient] @ absorb[:, c]
        sub = m[np.ix_(cls, cls)]
        pi[cls] += weight * _stationary_irreducible(sub / sub.sum(axis=1, keepdims=True))
    return pi / pi.sum()


@dataclass(frozen=True)
class StationaryPayoffs:
    E_b: float
    E_r: float
    pi: np.ndarray

    def __iter__(self):
        return iter((self.E_b, self.E_r, self.pi))


def stationary_payoffs(p: LeaderStrategy | Sequence[float], q: RequestorStrategy | Sequence[float],
                       pay: PayoffMatrices) -> StationaryPayoffs:
    pv = p.p if isinstance(p, LeaderStrategy) else p
    qv = q.q if isinstance(q, RequestorStrategy) else q
    pi = limiting_distribution(transition_matrix(pv, qv))
    return StationaryPayoffs(float(pi @ pay.xv), float(pi @ pay.yv), pi)


def linear_relation_residual(p_zd: LeaderStrategy | Sequence[float], q, pay: PayoffMatrices,
                             chi: float) -> float:
    e_b, e_r, _ = stationary_payoffs(p_zd, q, pay)
    return (e_b - pay.x[0]) - chi * (e_r - pay.y[0])


# ---------------------------------------------------------------------------
# Repeated play with an adaptive requestor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Adaptation:
    """Requestor learning: every ``period`` rounds, q += step * grad E_r, clipped to [0, 1].

    ``tremble`` is the requestor's execution-error rate: the strategy in force
    is q*(1 - tremble) + (1 - q)*tremble, both in play and in the payoff
    estimate. ``fd_step`` is the finite-difference step for the gradient.
    """

    step: float = 0.5
    period: int = 10
    tremble: float = 0.01
    fd_step: float = 1e-6


def effective_q(q: np.ndarray, tremble: float) -> np.ndarray:
    return q * (1 - tremble) + (1 - q) * tremble


def requestor_gradient(p: Sequence[float], q: np.ndarray, pay: PayoffMatrices, adaptation: Adaptation) -> np.ndarray:
    """Finite-difference gradient of E_r in the requestor's intended q (one-sided at the box edge)."""
    h = adaptation.fd_step
    grad = np.zeros(2)
    for i in range(2):
        up, down = q.copy(), q.copy()
        up[i] = min(1.0, q[i] + h)
        down[i] = max(0.0, q[i] - h)
        e_up = stationary_payoffs(p, effective_q(up, adaptation.tremble), pay).E_r
        e_down = stationary_payoffs(p, effective_q(down, adaptation.tremble), pay).E_r
        grad[i] = (e_up - e_down) / (up[i] - down[i])
    return grad


@dataclass
class Trajectory:
    strategy_name: str
    q1: np.ndarray
    q2: np.ndarray
    coop_rate: np.ndarray
    U_b: np.ndarray
    U_r: np.ndarray
    updates: int = 0
    converged_at_update: int | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def rounds(self) -> int:
        return len(self.q1)

    @property
    def terminal_q(self) -> tuple[float, float]:
        return float(self.q1[-1]), float(self.q2[-1])

    def reached(self, level: float = 0.99) -> bool:
        return bool(np.any(np.minimum(self.q1, self.q2) >= level))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("round", "q1", "q2", "coop_rate", "U_b_running", "U_r_running", "strategy_name"))
        for t in range(self.rounds):
            w.writerow((t + 1, f"{self.q1[t]:.9f}", f"{self.q2[t]:.9f}", f"{self.coop_rate[t]:.9f}",
                        f"{self.U_b[t]:.9f}", f"{self.U_r[t]:.9f}", self.strategy_name))
        return buf.getvalue()


def play_repeated_game(leader: LeaderStrategy, q0: float | Sequence[float], adaptation: Adaptation | None,
                       rounds: int, seed: int = 0, pay: PayoffMatrices | None = None,
                       converge_level: float = 0.99) -> Trajectory:
    """Simulate repeated settlement rounds with a gradient-ascent requestor.

    ``adaptation=None`` (or ``step == 0``) keeps q fixed. The first round
    treats the previous state as cc. Recorded per round: the requestor's
    intended (q1, q2), the cooperation probability in force given the
    leader's action, and the running average payoffs.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    pay = pay or PayoffMatrices()
    q = np.array([q0, q0] if np.isscalar(q0) else q0, float)
    if np.any((q < 0) | (q > 1)):
        raise ValueError("q0 must lie in [0, 1]")
    p = np.asarray(leader.p, float)
    tremble = adaptation.tremble if adaptation else 0.0
    rng = np.random.default_rng(seed)
    u_lead = rng.random(rounds)
    u_req = rng.random(rounds)

    q1s, q2s, coop, ub, ur = (np.empty(rounds) for _ in range(5))
    state = 0
    total_b = total_r = 0.0
    updates = 0
    converged_at = None
    learning = adaptation is not None and adaptation.step != 0
    for t in range(rounds):
        q_eff = effective_q(q, tremble)
        lead_c = u_lead[t] < p[state]
        c_prob = q_eff[0] if lead_c else q_eff[1]
        req_c = u_req[t] < c_prob
        state = (0 if req_c else 1) if lead_c else (2 if req_c else 3)
        total_b += pay.x[state]
        total_r += pay.y[state]
        q1s[t], q2s[t] = q
        coop[t] = c_prob
        ub[t] = total_b / (t + 1)
        ur[t] = total_r / (t + 1)
        if converged_at is None and min(q) >= converge_level:
            converged_at = updates
        if learning and (t + 1) % adaptation.period == 0:
            q = np.clip(q + adaptation.step * requestor_gradient(p, q, pay, adaptation), 0.0, 1.0)
            updates += 1
    meta = {"adaptation_rule": "projected finite-difference gradient ascent on E_r (modeling choice)"}
    if adaptation:
        meta.update(step=adaptation.step, period=adaptation.period, tremble=adaptation.tremble)
    return Trajectory(leader.name, q1s, q2s, coop, ub, ur, updates, converged_at, meta)


# ---------------------------------------------------------------------------
# Invoicing and reward allocation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rates:
    w_l: int
    w_a: int
    w_b: int


@dataclass(frozen=True)
class Invoice:
    task_id: int
    sensing_total: int
    n_local: int
    n_agg: int
    n_blocks: int
    rates: Rates
    W: int


def _model_blocks(ledger_chain, task_id: int):
    for block in ledger_chain.blocks:
        if any(tx.task_id == task_id and tx.kind is TxKind.GLOBAL_MODEL_RECORD and tx.payload.get("aggregation")
               for tx in block.txs):
            yield block


def compute_invoice(ledger: Ledger, task_id: int, rates: Rates) -> Invoice:
    """Sum every billable record of ``task_id`` on the chain (all amounts in minor units)."""
    records = query_task_records(ledger.chain, task_id)
    if not any(tx.kind is TxKind.TASK_REQUEST for tx in records):
        raise SettlementError(f"no committed task {task_id}")
    sensing = sum(int(tx.payload["amount"]) for tx in records if tx.kind is TxKind.SENSING_PAYMENT_REPORT)
    n_local = sum(1 for tx in records if tx.kind is TxKind.LOCAL_UPDATE_REF)
    n_agg = sum(1 for tx in records if tx.kind is TxKind.GLOBAL_MODEL_RECORD and tx.payload.get("aggregation"))
    n_blocks = sum(1 for _ in _model_blocks(ledger.chain, task_id))
    w = sensing + n_local * rates.w_l + n_agg * rates.w_a + n_blocks * rates.w_b
    return Invoice(task_id, sensing, n_local, n_agg, n_blocks, rates, w)


def record_settlement(ledger: Ledger, invoice: Invoice, amount_paid: int, requestor_id: str,
                      cooperative: bool) -> None:
    ledger.record(TxKind.SETTLEMENT_RECORD, invoice.task_id,
                  {"W": invoice.W, "amount_paid": int(amount_paid), "cooperative": bool(cooperative)},
                  requestor_id)


def allocate_rewards(invoice: Invoice, ledger: Ledger, payer: str = "contract:settlement") -> list:
    """Split the settled payment among contributors and pool the RewardAllocation records."""
    records = query_task_records(ledger.chain, invoice.task_id)
    settlements = [tx for tx in records if tx.kind is TxKind.SETTLEMENT_RECORD]
    if not settlements:
        raise AllocationRefused(f"task {invoice.task_id} has no settlement record")
    paid = int(settlements[-1].payload["amount_paid"])
    if paid < invoice.W:
        raise AllocationRefused(f"task {invoice.task_id}: paid {paid} < W={invoice.W}")

    shares: dict[str, int] = {}

    def credit(who: str, amount: int) -> None:
        shares[who] = shares.get(who, 0) + amount

    r = invoice.rates
    for tx in records:
        if tx.kind is TxKind.SENSING_PAYMENT_REPORT:
            credit(tx.submitter, int(tx.payload["amount"]))
        elif tx.kind is TxKind.LOCAL_UPDATE_REF:
            credit(tx.submitter, r.w_l)
        elif tx.kind is TxKind.GLOBAL_MODEL_RECORD and tx.payload.get("aggregation"):
            credit(tx.submitter, r.w_a)
    for block in _model_blocks(ledger.chain, invoice.task_id):
        credit(block.proposer, r.w_b)

    if sum(shares.values()) != invoice.W:
        raise LedgerError("allocation does not conserve the invoice total")
    txs = []
    for who in sorted(shares):
        txs.append(ledger.record(TxKind.REWARD_ALLOCATION, invoice.task_id,
                                 {"recipient": who, "amount": shares[who]}, payer))
    return txs
