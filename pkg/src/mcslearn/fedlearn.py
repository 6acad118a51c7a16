"""Federated learning at the edge: multinomial logistic regression + FedAvg.

Local models are submitted whole (weights, not deltas) as blobs referenced by
signed LocalUpdateRef transactions. The round leader aggregates the verified
updates and seals a block carrying them together with a GlobalModelRecord.
"""

from __future__ import annotations

import csv
import io
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .ledger import ContentAddress, KeyRing, Ledger, Transaction, TxKind, make_tx


class FLError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat vector: W (features x classes, row-major) followed by the bias."""

    weights: np.ndarray
    features: int
    classes: int

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.size != self.features * self.classes + self.classes:
            raise FLError(f"expected {self.features * self.classes + self.classes} weights, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise FLError("model weights must be finite")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, features: int, classes: int) -> "ModelParams":
        return cls(np.zeros(features * classes + classes), features, classes)

    @property
    def dims(self) -> tuple[int, int]:
        return self.features, self.classes

    @property
    def W(self) -> np.ndarray:
        return self.weights[: self.features * self.classes].reshape(self.features, self.classes)

    @property
    def b(self) -> np.ndarray:
        return self.weights[self.features * self.classes:]

    def __eq__(self, other) -> bool:
        return (isinstance(other, ModelParams) and self.dims == other.dims
                and np.array_equal(self.weights, other.weights))

    def to_bytes(self) -> bytes:
        return struct.pack("<II", self.features, self.classes) + self.weights.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        f, c = struct.unpack_from("<II", data)
        return cls(np.frombuffer(data, dtype="<f8", offset=8), f, c)


@dataclass(frozen=True)
class DatasetShard:
    features: np.ndarray
    labels: np.ndarray
    owner: str

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise FLError(f"shard {self.owner}: {self.features.shape[0]} rows vs {self.labels.shape[0]} labels")
        if self.labels.size and self.labels.min() < 0:
            raise FLError(f"shard {self.owner}: negative label")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def histogram(self, classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=classes)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.1
    local_epochs: int = 1
    batch_size: int = 32
    max_rounds: int = 200
    target_accuracy: float = 0.85
    convergence_window: int = 5
    convergence_delta: float = 1e-3
    weighting: str = "samples"   # or "equal"

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise FLError("learning_rate must be >= 0")
        if self.local_epochs < 1 or self.batch_size < 1 or self.max_rounds < 1 or self.convergence_window < 1:
            raise FLError("local_epochs, batch_size, max_rounds and convergence_window must be >= 1")
        if not 0 < self.target_accuracy < 1:
            raise FLError("target_accuracy must lie in (0, 1)")
        if not self.convergence_delta > 0:
            raise FLError("convergence_delta must be > 0")
        if self.weighting not in ("samples", "equal"):
            raise FLError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True)
class LocalUpdate:
    task_id: int
    round: int
    params: ModelParams
    sample_count: int
    submitter: str
    signature: str = ""

    def payload(self, model_addr: str) -> dict:
        return {"round": self.round, "model": model_addr, "sample_count": self.sample_count}


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def make_synthetic_dataset(seed: int, n_samples: int, classes: int, features: int, n_shards: int,
                           skew: float = 0.0, separation: float = 1.0, conditioning: float = 1.0,
                           owners: Sequence[str] | None = None) -> tuple[list[DatasetShard], DatasetShard]:
    """Gaussian class clusters split into equal-size shards plus a held-out tenth.

    Shard k takes ``round(skew * size)`` samples of class ``k % classes`` and is
    filled with a contiguous run of the remaining samples in class-interleaved order.
    ``conditioning`` is the ratio of the largest to the smallest noise standard
    deviation along randomly rotated axes (1 gives isotropic clusters).
    """
    if not 0.0 <= skew <= 1.0:
        raise FLError("skew must lie in [0, 1]")
    if conditioning < 1:
        raise FLError("conditioning must be >= 1")
    if classes < 2 or features < 1 or n_shards < 1:
        raise FLError("need classes >= 2, features >= 1, n_shards >= 1")
    if n_samples < n_shards:
        raise FLError(f"n_samples={n_samples} < n_shards={n_shards}")
    n_test = n_samples // 10
    size = (n_samples - n_test) // n_shards
    if size < 1:
        raise FLError(f"{n_samples} samples leave no training rows for {n_shards} shards")
    owners = list(owners) if owners is not None else [f"edge-{k}" for k in range(n_shards)]
    if len(owners) != n_shards:
        raise FLError("need one owner per shard")

    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(classes, features))
    # labels are balanced separately in the test and training parts
    y = np.concatenate([rng.permutation(np.arange(n_test) % classes),
                        rng.permutation(np.arange(n_samples - n_test) % classes)])
    rot, _ = np.linalg.qr(rng.normal(size=(features, features)))
    scales = np.geomspace(1.0, conditioning, features)
    x = means[y] + (rng.normal(size=(n_samples, features)) * scales) @ rot.T

    test = DatasetShard(x[:n_test], y[:n_test], "test")
    pool = {c: list(np.flatnonzero(y[n_test:] == c) + n_test) for c in range(classes)}

    picked: list[list[int]] = []
    for k in range(n_shards):
        dom = k % classes
        m = int(round(skew * size))
        if m > len(pool[dom]):
            raise FLError(f"infeasible shards: shard {k} needs {m} samples of class {dom}, "
                          f"{len(pool[dom])} left")
        picked.append(pool[dom][:m])
        pool[dom] = pool[dom][m:]

    rest: list[int] = []
    depth = max((len(v) for v in pool.values()), default=0)
    for i in range(depth):
        rest.extend(pool[c][i] for c in range(classes) if i < len(pool[c]))
    # contiguous runs of the interleaved list keep every shard's filler class-balanced
    pos = 0
    for k in range(n_shards):
        need = size - len(picked[k])
        picked[k].extend(rest[pos:pos + need])
        pos += need

    shards = []
    for k, idx in enumerate(picked):
        idx = rng.permutation(np.asarray(idx, dtype=np.int64))
        shards.append(DatasetShard(x[idx], y[idx], owners[k]))
    return shards, test


def subsample(shards: Sequence[DatasetShard], fraction: float) -> list[DatasetShard]:
    """Leading ``ceil(fraction * len)`` rows of every shard (shards are already shuffled)."""
    if not 0 < fraction <= 1:
        raise FLError("fraction must lie in (0, 1]")
    out = []
    for s in shards:
        m = max(1, math.ceil(fraction * len(s)))
        out.append(DatasetShard(s.features[:m], s.labels[:m], s.owner))
    return out


def combine(shards: Sequence[DatasetShard], owner: str = "all") -> DatasetShard:
    return DatasetShard(np.concatenate([s.features for s in shards]),
                        np.concatenate([s.labels for s in shards]), owner)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(model: ModelParams, x: np.ndarray) -> np.ndarray:
    return _softmax(x @ model.W + model.b)


def loss_and_grad(model: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient in the flat parameter layout."""
    n = x.shape[0]
    p = predict_proba(model, x)
    loss = -float(np.mean(np.log(np.clip(p[np.arange(n), y], 1e-300, None))))
    d = p
    d[np.arange(n), y] -= 1.0
    d /= n
    return loss, np.concatenate([(x.T @ d).reshape(-1), d.sum(axis=0)])


def loss(model: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    return loss_and_grad(model, x, y)[0]


def accuracy(model: ModelParams, data: DatasetShard) -> float:
    if len(data) == 0:
        return 0.0
    return float(np.mean(np.argmax(data.features @ model.W + model.b, axis=1) == data.labels))


def _check_dims(model: ModelParams, shard: DatasetShard) -> None:
    if shard.features.shape[1] != model.features:
        raise FLError(f"shard {shard.owner} has {shard.features.shape[1]} features, model {model.features}")
    if len(shard) and shard.labels.max() >= model.classes:
        raise FLError(f"shard {shard.owner} has label {shard.labels.max()} >= {model.classes} classes")


def _owner_key(owner: str) -> int:
    return zlib.crc32(owner.encode())


def local_train(model: ModelParams, shard: DatasetShard, cfg: TrainingConfig, *, task_id: int = 0,
                round: int = 1, seed: int = 0) -> LocalUpdate:
    """Mini-batch gradient descent; batch order depends only on (seed, round, owner, epoch)."""
    _check_dims(model, shard)
    if len(shard) == 0:
        raise FLError(f"shard {shard.owner} is empty")
    w = model.weights.copy()
    n = len(shard)
    for epoch in range(cfg.local_epochs):
        order = np.random.default_rng([seed, round, _owner_key(shard.owner), epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, g = loss_and_grad(ModelParams(w, model.features, model.classes), shard.features[idx], shard.labels[idx])
            w -= cfg.learning_rate * g
    return LocalUpdate(task_id, round, ModelParams(w, model.features, model.classes), n, shard.owner)


def aggregate(updates: Sequence[LocalUpdate], weighting: str = "samples") -> ModelParams:
    """FedAvg: sample-count weighted mean of the local models."""
    if not updates:
        raise FLError("nothing to aggregate")
    dims = updates[0].params.dims
    rounds = {u.round for u in updates}
    if len(rounds) > 1:
        raise FLError(f"updates from mixed rounds {sorted(rounds)}")
    if any(u.params.dims != dims for u in updates):
        raise FLError("updates have mismatched dimensions")
    if weighting == "equal":
        counts = np.ones(len(updates))
    else:
        counts = np.array([u.sample_count for u in updates], dtype=np.float64)
    stack = np.stack([u.params.weights for u in updates])
    return ModelParams((counts / counts.sum()) @ stack, *dims)


def check_convergence(history: Sequence[float], cfg: TrainingConfig) -> bool:
    if not history:
        return False
    if history[-1] >= cfg.target_accuracy:
        return True
    if len(history) < cfg.convergence_window:
        return False
    tail = history[-cfg.convergence_window:]
    return max(tail) - min(tail) < cfg.convergence_delta


# ---------------------------------------------------------------------------
# Ledger integration
# ---------------------------------------------------------------------------


def update_transaction(keys: KeyRing, update: LocalUpdate, model_addr: str) -> Transaction:
    return make_tx(keys, TxKind.LOCAL_UPDATE_REF, update.task_id, update.payload(model_addr), update.submitter)


def forge_signature(tx: Transaction) -> Transaction:
    """Same content signed with a key the ring does not hold for the submitter."""
    bogus = KeyRing.tag(b"not-" + tx.submitter.encode(), tx.signing_bytes())
    return replace(tx, signature=bogus)


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    train_loss: float
    participants: int
    data_fraction: float


METRICS_COLUMNS = ("round", "test_accuracy", "train_loss", "participants", "data_fraction")


@dataclass
class FLResult:
    task_id: int
    model: ModelParams
    model_addr: str
    converged: bool
    rounds: int
    accuracy: float
    best_round: int
    history: list[RoundMetrics] = field(default_factory=list)
    record: Transaction | None = None
    discarded: int = 0

    @property
    def accuracies(self) -> list[float]:
        return [m.test_accuracy for m in self.history]

    def rounds_to(self, target: float) -> float:
        for m in self.history:
            if m.test_accuracy >= target:
                return m.round
        return math.inf

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for m in self.history:
            w.writerow([m.round, f"{m.test_accuracy:.6f}", f"{m.train_loss:.9f}", m.participants,
                        f"{m.data_fraction:g}"])
        return buf.getvalue()


def initial_model(ledger: Ledger, task_id: int, features: int, classes: int) -> ModelParams:
    """Requestor-supplied model, else the latest model of an earlier task of the same kind, else zeros."""
    try:
        req = ledger.task_request(task_id)
    except KeyError:
        return ModelParams.zeros(features, classes)
    addr = req.initial_model or ledger.historical_model(req.task_description, exclude_task=task_id)
    if addr is None:
        return ModelParams.zeros(features, classes)
    model = ModelParams.from_bytes(ledger.store.load(addr))
    if model.dims != (features, classes):
        raise FLError(f"initial model dims {model.dims} do not match data ({features}, {classes})")
    return model


def run_fl(task_id: int, shards: Sequence[DatasetShard], cfg: TrainingConfig, ledger: Ledger | None = None,
           engine=None, *, test_set: DatasetShard, classes: int | None = None, seed: int = 0,
           forge: Iterable[str] = (), data_fraction: float = 1.0, workers: int = 1,
           early_stop: bool = True) -> FLResult:
    """Training loop with on-chain update submission and leader-side aggregation.

    ``engine`` names the round leader (``leader_for(height)``); block commits
    go through the ledger's own commit hook. Submissions from owners listed in
    ``forge`` carry an invalid signature and are discarded by the ledger.
    With ``early_stop=False`` all ``max_rounds`` rounds run (fixed-budget
    curves); ``converged`` is still evaluated on the full history.
    """
    if not shards:
        raise FLError("no shards")
    ledger = ledger if ledger is not None else Ledger()
    forge = set(forge)
    features = shards[0].features.shape[1]
    classes = classes or int(max(max(s.labels.max() for s in shards if len(s)), test_set.labels.max())) + 1
    model = initial_model(ledger, task_id, features, classes)
    for s in shards:
        _check_dims(model, s)
    train_all = combine(shards)

    history: list[RoundMetrics] = []
    best = (-1.0, 0, model, "")
    discarded = 0
    converged = False
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(1, cfg.max_rounds + 1):
            train = lambda s: local_train(model, s, cfg, task_id=task_id, round=r, seed=seed)  # noqa: E731
            updates = list(pool.map(train, shards)) if pool else [train(s) for s in shards]
            accepted = []
            for u in updates:
                addr = str(ledger.store.store(u.params.to_bytes()))
                tx = update_transaction(ledger.keys, u, addr)
                if u.submitter in forge:
                    tx = forge_signature(tx)
                if ledger.submit(tx):
                    accepted.append(replace(u, signature=tx.signature))
                else:
                    discarded += 1
            if not accepted:
                raise FLError(f"round {r}: every local update was discarded")
            height = ledger.chain.tip.height + 1
            leader = engine.leader_for(height) if engine is not None else "node-0"
            model = aggregate(accepted, cfg.weighting)
            acc = accuracy(model, test_set)
            addr = str(ledger.store.store(model.to_bytes()))
            ledger.record(TxKind.GLOBAL_MODEL_RECORD, task_id,
                          {"round": r, "model": addr, "accuracy": round(acc, 12), "aggregation": True,
                           "participants": len(accepted)}, leader)
            ledger.seal_block(leader)
            history.append(RoundMetrics(r, acc, loss(model, train_all.features, train_all.labels),
                                        len(accepted), data_fraction))
            if acc > best[0]:
                best = (acc, r, model, addr)
            if check_convergence([m.test_accuracy for m in history], cfg):
                converged = True
                if early_stop:
                    break
    finally:
        if pool:
            pool.shutdown()

    if converged:
        final, final_addr, final_round, final_acc = model, addr, history[-1].round, history[-1].test_accuracy
    else:
        final_acc, final_round, final, final_addr = best
    height = ledger.chain.tip.height + 1
    leader = engine.leader_for(height) if engine is not None else "node-0"
    record = ledger.record(TxKind.GLOBAL_MODEL_RECORD, task_id,
                           {"round": final_round, "model": final_addr, "accuracy": round(final_acc, 12),
                            "aggregation": False, "final": True, "converged": converged}, leader)
    ledger.seal_block(leader)
    return FLResult(task_id, final, final_addr, converged, len(history), final_acc, final_round,
                    history, record, discarded)


def load_model(ledger: Ledger, addr: ContentAddress | str) -> ModelParams:
    return ModelParams.from_bytes(ledger.store.load(addr))
