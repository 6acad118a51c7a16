import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcslearn.fedlearn import (FLError, DatasetShard, LocalUpdate, ModelParams, TrainingConfig, accuracy, aggregate,
                               check_convergence, load_model, local_train, loss, loss_and_grad,
                               make_synthetic_dataset, run_fl, subsample)
from mcslearn.ledger import Ledger, TaskRequest, TxKind

from oracles import numeric_gradient


def _update(w, count=1, rnd=1, who="a", f=1, c=2):
    return LocalUpdate(1, rnd, ModelParams(np.asarray(w, float), f, c), count, who)


# -- data -------------------------------------------------------------------------

def test_iid_shards_have_balanced_histograms():
    shards, test = make_synthetic_dataset(0, 5500, 5, 4, 5, skew=0.0)
    assert len(test) == 550
    for s in shards:
        h = s.histogram(5)
        assert np.all(np.abs(h - len(s) / 5) <= 0.1 * len(s) / 5)


def test_full_skew_gives_one_class_per_shard():
    shards, _ = make_synthetic_dataset(1, 5500, 5, 4, 5, skew=1.0)
    for k, s in enumerate(shards):
        h = s.histogram(5)
        assert h[k] / len(s) >= 0.9


def test_dataset_deterministic():
    a, ta = make_synthetic_dataset(3, 1000, 3, 4, 4, skew=0.3, conditioning=5)
    b, tb = make_synthetic_dataset(3, 1000, 3, 4, 4, skew=0.3, conditioning=5)
    assert all(np.array_equal(x.features, y.features) and np.array_equal(x.labels, y.labels) for x, y in zip(a, b))
    assert np.array_equal(ta.features, tb.features)


def test_infeasible_shards_rejected():
    # 3 shards of 300 over 2 classes: shards 0 and 2 both want 300 of the 450 class-0 rows
    with pytest.raises(FLError, match="infeasible"):
        make_synthetic_dataset(0, 1000, 2, 3, 3, skew=1.0)
    make_synthetic_dataset(0, 1000, 2, 3, 4, skew=1.0)  # 4 x 225 fits exactly


def test_subsample_keeps_class_mix():
    shards, _ = make_synthetic_dataset(0, 11000, 10, 4, 5, skew=0.5)
    small = subsample(shards, 0.1)
    assert [len(s) for s in small] == [198] * 5
    assert all(np.count_nonzero(s.histogram(10)) > 2 for s in small)


# -- local training ------------------------------------------------------------------

def test_zero_learning_rate_leaves_params():
    shards, _ = make_synthetic_dataset(0, 500, 3, 4, 2)
    m = ModelParams(np.arange(15, dtype=float) / 10, 4, 3)
    out = local_train(m, shards[0], TrainingConfig(learning_rate=0.0, local_epochs=3))
    assert out.params == m and out.sample_count == len(shards[0])


def test_hand_stepped_gradient():
    # x=+1 labelled 0, x=-1 labelled 1, zero model: P=0.5 everywhere,
    # dW = [(1)(-.5) + (-1)(.5), (1)(.5) + (-1)(-.5)] / 2 = [-.5, .5], db = 0
    shard = DatasetShard(np.array([[1.0], [-1.0]]), np.array([0, 1]), "s")
    l, g = loss_and_grad(ModelParams.zeros(1, 2), shard.features, shard.labels)
    assert l == pytest.approx(np.log(2))
    assert np.allclose(g, [-0.5, 0.5, 0.0, 0.0])
    out = local_train(ModelParams.zeros(1, 2), shard, TrainingConfig(learning_rate=0.1, batch_size=2))
    assert np.allclose(out.params.weights, [0.05, -0.05, 0.0, 0.0])


def test_local_training_decreases_loss():
    shards, _ = make_synthetic_dataset(2, 2000, 3, 5, 2, separation=2.0)
    s = shards[0]
    m0 = ModelParams.zeros(5, 3)
    m1 = local_train(m0, s, TrainingConfig(learning_rate=0.1, local_epochs=5)).params
    assert loss(m1, s.features, s.labels) < loss(m0, s.features, s.labels)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(30, 4)), rng.integers(0, 3, 30)
    w = rng.normal(size=15)
    _, g = loss_and_grad(ModelParams(w, 4, 3), x, y)
    num = numeric_gradient(lambda v: loss(ModelParams(v, 4, 3), x, y), w)
    assert np.max(np.abs(g - num)) / np.max(np.abs(num)) < 1e-4


def test_model_bytes_round_trip():
    m = ModelParams(np.linspace(-1, 1, 15), 4, 3)
    assert ModelParams.from_bytes(m.to_bytes()) == m
    with pytest.raises(FLError):
        ModelParams(np.zeros(3), 4, 3)


# -- aggregation ------------------------------------------------------------------------

def test_aggregate_examples():
    w = np.array([1.0, -2.0, 3.0, 0.5])
    assert aggregate([_update(w), _update(w, who="b")]).weights.tolist() == w.tolist()
    assert np.allclose(aggregate([_update(w), _update(-w, who="b")]).weights, 0)
    ones = np.ones(4)
    got = aggregate([_update(0 * ones, count=1), _update(ones, count=3, who="b")])
    assert np.allclose(got.weights, 0.75)
    got = aggregate([_update(0 * ones, count=1), _update(ones, count=3, who="b")], weighting="equal")
    assert np.allclose(got.weights, 0.5)


def test_aggregate_errors():
    with pytest.raises(FLError):
        aggregate([])
    with pytest.raises(FLError):
        aggregate([_update(np.zeros(4)), _update(np.zeros(4), rnd=2)])
    with pytest.raises(FLError):
        aggregate([_update(np.zeros(4)), _update(np.zeros(6), f=2)])


@settings(max_examples=60)
@given(st.lists(st.tuples(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.integers(1, 50)),
                min_size=1, max_size=6), st.randoms())
def test_aggregate_permutation_invariant_and_convex(items, rnd):
    ups = [_update(w, count=c, who=str(i)) for i, (w, c) in enumerate(items)]
    a = aggregate(ups).weights
    shuffled = list(ups)
    rnd.shuffle(shuffled)
    assert np.allclose(aggregate(shuffled).weights, a, atol=1e-9)
    stack = np.array([w for w, _ in items])
    assert np.all(a >= stack.min(axis=0) - 1e-9) and np.all(a <= stack.max(axis=0) + 1e-9)


# -- convergence -------------------------------------------------------------------------

def test_check_convergence_examples():
    cfg = TrainingConfig(target_accuracy=0.85, convergence_window=3, convergence_delta=1e-3)
    assert not check_convergence([], cfg)
    assert check_convergence([0.5, 0.86], cfg)
    assert not check_convergence([0.5, 0.6], cfg)
    assert check_convergence([0.7, 0.7004, 0.7002], cfg)
    assert not check_convergence([0.7, 0.71, 0.7002], cfg)


# -- training loop -------------------------------------------------------------------------

def _small_task(n_shards=5, seed=0):
    return make_synthetic_dataset(seed, 3000, 3, 5, n_shards, separation=2.0)


CFG = TrainingConfig(learning_rate=0.1, max_rounds=200, target_accuracy=0.85)


def test_iid_run_converges():
    shards, test = _small_task()
    res = run_fl(1, shards, CFG, test_set=test)
    assert res.converged and res.rounds <= 200
    assert res.accuracy >= 0.85
    assert accuracy(res.model, test) == pytest.approx(res.accuracy)


def test_run_deterministic():
    shards, test = _small_task()
    a = run_fl(1, shards, CFG, test_set=test, seed=3)
    b = run_fl(1, shards, CFG, test_set=test, seed=3, workers=3)
    assert a.model == b.model and a.metrics_csv() == b.metrics_csv()


def test_forged_update_excluded():
    shards, test = _small_task()
    forged = run_fl(1, shards, CFG, test_set=test, forge={"edge-4"})
    honest = run_fl(1, shards[:4], CFG, test_set=test)
    assert forged.discarded == forged.rounds
    assert forged.model == honest.model and forged.accuracies == honest.accuracies


def test_single_shard_equals_local_model():
    shards, test = _small_task(n_shards=1)
    cfg = TrainingConfig(learning_rate=0.1, max_rounds=1)
    res = run_fl(1, shards, cfg, test_set=test)
    local = local_train(ModelParams.zeros(5, 3), shards[0], cfg, task_id=1, round=1)
    assert res.model == local.params


def test_records_on_chain_and_blobs_resolve():
    ledger = Ledger()
    tid = ledger.publish_task(TaskRequest("req", "clusters", 0.85))
    ledger.seal_block("node-0")
    shards, test = _small_task()
    res = run_fl(tid, shards, CFG, ledger, test_set=test)
    recs = ledger.task_records(tid)
    updates = [t for t in recs if t.kind is TxKind.LOCAL_UPDATE_REF]
    globals_ = [t for t in recs if t.kind is TxKind.GLOBAL_MODEL_RECORD and t.payload["aggregation"]]
    assert len(updates) == 5 * res.rounds and len(globals_) == res.rounds
    assert [t.payload["round"] for t in globals_] == list(range(1, res.rounds + 1))
    for t in updates[:5]:
        assert load_model(ledger, t.payload["model"]).dims == (5, 3)
    assert recs[-1] is res.record and recs[-1].payload["final"] is True
    assert load_model(ledger, res.record.payload["model"]) == res.model


def test_initial_model_taken_from_request():
    ledger = Ledger()
    start = ModelParams(np.full(18, 0.01), 5, 3)
    addr = ledger.store.store(start.to_bytes())
    tid = ledger.publish_task(TaskRequest("req", "clusters", 0.85, initial_model=addr))
    ledger.seal_block("node-0")
    shards, test = _small_task(n_shards=1)
    cfg = TrainingConfig(learning_rate=0.1, max_rounds=1)
    res = run_fl(tid, shards, cfg, ledger, test_set=test)
    assert res.model == local_train(start, shards[0], cfg, task_id=tid, round=1).params


def test_dimension_mismatch_rejected():
    shards, test = _small_task()
    bad = DatasetShard(np.zeros((3, 2)), np.zeros(3, dtype=int), "x")
    with pytest.raises(FLError):
        run_fl(1, shards + [bad], CFG, test_set=test)
