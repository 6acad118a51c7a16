"""Consortium ledger: hash-chained blocks, signed transactions, blob storage,
and the worker-recruitment contract fired by task publication."""

from __future__ import annotations

import enum
import hashlib
import hmac
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

HASH_BYTES = 32
ZERO_HASH = "00" * HASH_BYTES


class LedgerError(Exception):
    pass


class TaskRejected(LedgerError):
    pass


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Content-addressed blob store
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class ContentAddress:
    digest: str

    def __str__(self) -> str:
        return self.digest


class BlobStore:
    """In-process content-addressed storage for model payloads kept off-chain."""

    def __init__(self) -> None:
        self._blobs: dict[str, bytes] = {}

    def store(self, data: bytes) -> ContentAddress:
        if not data:
            raise ValueError("cannot store an empty blob")
        addr = ContentAddress(sha256_hex(bytes(data)))
        self._blobs.setdefault(addr.digest, bytes(data))
        return addr

    def load(self, addr: ContentAddress | str) -> bytes:
        digest = addr.digest if isinstance(addr, ContentAddress) else addr
        try:
            return self._blobs[digest]
        except KeyError:
            raise KeyError(f"no blob stored at {digest}") from None

    def __contains__(self, addr: ContentAddress | str) -> bool:
        digest = addr.digest if isinstance(addr, ContentAddress) else addr
        return digest in self._blobs

    def __len__(self) -> int:
        return len(self._blobs)


# ---------------------------------------------------------------------------
# Keys and signatures
# ---------------------------------------------------------------------------


class KeyRing:
    """Deterministic per-identity secrets with keyed-hash authenticity tags.

    Stands in for a PKI: every consortium node holds the ring and can verify
    any participant's tag. Keys derive from ``(seed, identity)``.
    """

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self._keys: dict[str, bytes] = {}

    def key_for(self, identity: str) -> bytes:
        key = self._keys.get(identity)
        if key is None:
            key = hashlib.sha256(f"mcslearn-key:{self.seed}:{identity}".encode()).digest()
            self._keys[identity] = key
        return key

    @staticmethod
    def tag(key: bytes, message: bytes) -> str:
        return hmac.new(key, message, hashlib.sha256).hexdigest()

    def sign(self, identity: str, message: bytes) -> str:
        return self.tag(self.key_for(identity), message)

    def verify(self, identity: str, message: bytes, signature: str) -> bool:
        return hmac.compare_digest(self.sign(identity, message), signature)


# ---------------------------------------------------------------------------
# Transactions and blocks
# ---------------------------------------------------------------------------


class TxKind(str, enum.Enum):
    TASK_REQUEST = "TaskRequest"
    RECRUITMENT_RESULT = "RecruitmentResult"
    SENSING_PAYMENT_REPORT = "SensingPaymentReport"
    LOCAL_UPDATE_REF = "LocalUpdateRef"
    GLOBAL_MODEL_RECORD = "GlobalModelRecord"
    SETTLEMENT_RECORD = "SettlementRecord"
    REWARD_ALLOCATION = "RewardAllocation"


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    task_id: int
    payload: dict
    submitter: str
    signature: str = ""

    def signing_bytes(self) -> bytes:
        return canonical_json(
            {"kind": self.kind.value, "task_id": self.task_id,
             "payload": self.payload, "submitter": self.submitter}
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "task_id": self.task_id, "payload": self.payload,
                "submitter": self.submitter, "signature": self.signature}

    @classmethod
    def from_dict(cls, d: dict) -> "Transaction":
        return cls(TxKind(d["kind"]), int(d["task_id"]), d["payload"], d["submitter"], d["signature"])


def make_tx(keys: KeyRing, kind: TxKind, task_id: int, payload: dict, submitter: str) -> Transaction:
    unsigned = Transaction(kind, task_id, payload, submitter)
    return Transaction(kind, task_id, payload, submitter, keys.sign(submitter, unsigned.signing_bytes()))


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: str
    proposer: str
    txs: tuple[Transaction, ...]
    block_hash: str

    @staticmethod
    def compute_hash(height: int, prev_hash: str, proposer: str, txs: Sequence[Transaction]) -> str:
        body = [tx.to_dict() for tx in txs]
        return sha256_hex(canonical_json(
            {"height": height, "prev_hash": prev_hash, "proposer": proposer, "txs": body}))

    @classmethod
    def build(cls, height: int, prev_hash: str, proposer: str, txs: Iterable[Transaction]) -> "Block":
        txs = tuple(txs)
        return cls(height, prev_hash, proposer, txs, cls.compute_hash(height, prev_hash, proposer, txs))

    @property
    def size_bytes(self) -> int:
        return len(canonical_json(self.to_dict()))

    def to_dict(self) -> dict:
        return {"height": self.height, "prev_hash": self.prev_hash, "block_hash": self.block_hash,
                "proposer": self.proposer, "txs": [tx.to_dict() for tx in self.txs]}

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        return cls(int(d["height"]), d["prev_hash"], d["proposer"],
                   tuple(Transaction.from_dict(t) for t in d["txs"]), d["block_hash"])


GENESIS = Block.build(0, ZERO_HASH, "genesis", ())


class RejectReason(str, enum.Enum):
    BAD_HEIGHT = "bad height"
    BAD_PREV_HASH = "bad prev_hash"
    BAD_BLOCK_HASH = "bad block hash"
    BAD_SIGNATURE = "bad signature"


class BlockRejected(LedgerError):
    def __init__(self, reason: RejectReason):
        super().__init__(reason.value)
        self.reason = reason


class Chain:
    """Append-only block sequence starting at the fixed genesis block."""

    def __init__(self) -> None:
        self._blocks: list[Block] = [GENESIS]

    @property
    def blocks(self) -> tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def tip(self) -> Block:
        return self._blocks[-1]

    def __len__(self) -> int:
        return len(self._blocks)

    def __iter__(self):
        return iter(self._blocks)

    def transactions(self) -> Iterable[tuple[Block, Transaction]]:
        for block in self._blocks:
            for tx in block.txs:
                yield block, tx

    def _append_unchecked(self, block: Block) -> None:
        self._blocks.append(block)


def validate_block(chain: Chain, block: Block, keys: KeyRing) -> RejectReason | None:
    """Check ``block`` as the next block of ``chain``; ``None`` means accept."""
    parent = chain.tip
    if block.height != parent.height + 1:
        return RejectReason.BAD_HEIGHT
    if block.prev_hash != parent.block_hash:
        return RejectReason.BAD_PREV_HASH
    if block.block_hash != Block.compute_hash(block.height, block.prev_hash, block.proposer, block.txs):
        return RejectReason.BAD_BLOCK_HASH
    for tx in block.txs:
        if not keys.verify(tx.submitter, tx.signing_bytes(), tx.signature):
            return RejectReason.BAD_SIGNATURE
    return None


def validate_chain(chain: Chain, keys: KeyRing) -> RejectReason | None:
    replay = Chain()
    if chain.blocks[0] != GENESIS:
        return RejectReason.BAD_BLOCK_HASH
    for block in chain.blocks[1:]:
        reason = validate_block(replay, block, keys)
        if reason is not None:
            return reason
        replay._append_unchecked(block)
    return None


def query_task_records(chain: Chain, task_id: int) -> list[Transaction]:
    return [tx for _, tx in chain.transactions() if tx.task_id == task_id]


# ---------------------------------------------------------------------------
# Task publication and worker recruitment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskRequest:
    requestor_id: str
    task_description: str
    performance_requirement: float
    initial_model: ContentAddress | None = None

    def validate(self) -> None:
        req = self.performance_requirement
        if not (0.0 < req < 1.0):
            raise TaskRejected(f"performance_requirement must lie in (0, 1), got {req}")
        if not self.requestor_id:
            raise TaskRejected("requestor_id must be non-empty")

    def to_payload(self) -> dict:
        return {"requestor_id": self.requestor_id, "task_description": self.task_description,
                "performance_requirement": self.performance_requirement,
                "initial_model": self.initial_model.digest if self.initial_model else None}

    @classmethod
    def from_payload(cls, p: dict) -> "TaskRequest":
        init = p.get("initial_model")
        return cls(p["requestor_id"], p["task_description"], float(p["performance_requirement"]),
                   ContentAddress(init) if init else None)


@dataclass(frozen=True)
class WorkerDescriptor:
    worker_id: str
    capacity: float = 1.0


@dataclass(frozen=True)
class RecruitmentResult:
    task_id: int
    workers: tuple[str, ...]
    ok: bool = True
    reason: str = ""

    def to_payload(self) -> dict:
        return {"workers": list(self.workers), "ok": self.ok, "reason": self.reason}


RecruitmentPolicy = Callable[[TaskRequest, Sequence[WorkerDescriptor]], list[WorkerDescriptor]]


def select_all(req: TaskRequest, candidates: Sequence[WorkerDescriptor]) -> list[WorkerDescriptor]:
    return list(candidates)


def top_k_by_capacity(k: int) -> RecruitmentPolicy:
    """Highest declared capacity first; ties go to the lexicographically lowest id."""
    if k < 1:
        raise ValueError("k must be >= 1")

    def policy(req: TaskRequest, candidates: Sequence[WorkerDescriptor]) -> list[WorkerDescriptor]:
        ranked = sorted(candidates, key=lambda w: (-w.capacity, w.worker_id))
        return ranked[:k]

    policy.__name__ = f"top_{k}_by_capacity"
    return policy


def recruit_workers(task_id: int, req: TaskRequest, candidates: Sequence[WorkerDescriptor],
                    policy: RecruitmentPolicy = select_all) -> RecruitmentResult:
    if not candidates:
        return RecruitmentResult(task_id, (), ok=False, reason="empty candidate pool")
    chosen = policy(req, candidates)
    if not chosen:
        return RecruitmentResult(task_id, (), ok=False, reason="policy selected no workers")
    return RecruitmentResult(task_id, tuple(w.worker_id for w in chosen))


@dataclass
class Recruiter:
    """Smart contract bound to TaskRequest inclusion."""

    candidates: Sequence[WorkerDescriptor]
    policy: RecruitmentPolicy = select_all
    address: str = "contract:recruitment"


class Ledger:
    """Single-writer ledger state: chain, blob store, pending pool and contracts.

    Blocks are appended through :meth:`seal_block`, which validates them
    first; an optional ``commit_hook`` (the consensus engine) must approve
    each block before it is appended.
    """

    def __init__(self, keys: KeyRing | None = None, recruiter: Recruiter | None = None,
                 commit_hook: Callable[[Block], bool] | None = None) -> None:
        self.keys = keys or KeyRing()
        self.chain = Chain()
        self.store = BlobStore()
        self.pending: list[Transaction] = []
        self.recruiter = recruiter
        self.commit_hook = commit_hook
        self._task_ids = itertools.count(1)
        self.recruitments: dict[int, RecruitmentResult] = {}

    # -- submission -----------------------------------------------------
    def submit(self, tx: Transaction) -> bool:
        """Signature-check and pool a transaction; forged ones are discarded."""
        if not self.keys.verify(tx.submitter, tx.signing_bytes(), tx.signature):
            return False
        self.pending.append(tx)
        return True

    def record(self, kind: TxKind, task_id: int, payload: dict, submitter: str) -> Transaction:
        tx = make_tx(self.keys, kind, task_id, payload, submitter)
        self.submit(tx)
        return tx

    def publish_task(self, req: TaskRequest) -> int:
        req.validate()
        if req.initial_model is not None and req.initial_model not in self.store:
            raise TaskRejected(f"initial model {req.initial_model} is not in the blob store")
        task_id = next(self._task_ids)
        self.record(TxKind.TASK_REQUEST, task_id, req.to_payload(), req.requestor_id)
        return task_id

    # -- block production ---------------------------------------------
    def build_block(self, proposer: str, txs: Sequence[Transaction] | None = None) -> Block:
        txs = list(self.pending) if txs is None else list(txs)
        tip = self.chain.tip
        return Block.build(tip.height + 1, tip.block_hash, proposer, txs)

    def append(self, block: Block) -> None:
        reason = validate_block(self.chain, block, self.keys)
        if reason is not None:
            raise BlockRejected(reason)
        if self.commit_hook is not None and not self.commit_hook(block):
            raise LedgerError(f"consensus failed for block at height {block.height}")
        self.chain._append_unchecked(block)
        included = {tx.signature for tx in block.txs}
        self.pending = [tx for tx in self.pending if tx.signature not in included]
        self._run_contracts(block)

    def seal_block(self, proposer: str) -> Block:
        block = self.build_block(proposer)
        self.append(block)
        return block

    def _run_contracts(self, block: Block) -> None:
        if self.recruiter is None:
            return
        for tx in block.txs:
            if tx.kind is not TxKind.TASK_REQUEST:
                continue
            req = TaskRequest.from_payload(tx.payload)
            result = recruit_workers(tx.task_id, req, self.recruiter.candidates, self.recruiter.policy)
            self.recruitments[tx.task_id] = result
            self.record(TxKind.RECRUITMENT_RESULT, tx.task_id, result.to_payload(), self.recruiter.address)

    # -- queries ---------------------------------------------------------
    def task_records(self, task_id: int) -> list[Transaction]:
        return query_task_records(self.chain, task_id)

    def task_request(self, task_id: int) -> TaskRequest:
        for tx in self.task_records(task_id):
            if tx.kind is TxKind.TASK_REQUEST:
                return TaskRequest.from_payload(tx.payload)
        raise KeyError(f"unknown task {task_id}")

    def historical_model(self, task_description: str, exclude_task: int | None = None) -> ContentAddress | None:
        """Most recent final global model of an earlier task with the same description."""
        descriptions = {tx.task_id: tx.payload["task_description"]
                        for _, tx in self.chain.transactions() if tx.kind is TxKind.TASK_REQUEST}
        found = None
        for _, tx in self.chain.transactions():
            if (tx.kind is TxKind.GLOBAL_MODEL_RECORD and tx.task_id != exclude_task
                    and descriptions.get(tx.task_id) == task_description):
                found = ContentAddress(tx.payload["model"])
        return found


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


def export_chain(chain: Chain) -> str:
    """One JSON object per line, genesis included."""
    return "".join(json.dumps(b.to_dict(), sort_keys=True) + "\n" for b in chain.blocks)


def import_chain(text: str, keys: KeyRing) -> Chain:
    chain = Chain()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or Block.from_dict(json.loads(lines[0])) != GENESIS:
        raise LedgerError("export does not start with the genesis block")
    for ln in lines[1:]:
        block = Block.from_dict(json.loads(ln))
        reason = validate_block(chain, block, keys)
        if reason is not None:
            raise BlockRejected(reason)
        chain._append_unchecked(block)
    return chain
