import random

import pytest
from hypothesis import given, settings, strategies as st

from mcslearn.consensus import (CONTROL_BYTES, HEADER_BYTES, ConsensusConfig, ConsensusEngine, ScalingPoint,
                                SimNetwork, elect_leader, fault_free_message_count, growth_ratios, linear_fit_r2,
                                measure_scaling, node_sweep, round_timeout, run_consensus_round, scaling_csv,
                                server_sweep)
from mcslearn.ledger import Ledger, LedgerError, TxKind


def test_elect_leader_examples():
    assert elect_leader(0, 4) == 0
    assert elect_leader(5, 4) == 1
    assert sorted(elect_leader(v, 7) for v in range(7)) == list(range(7))
    with pytest.raises(ValueError):
        elect_leader(0, 0)


def test_config_defaults_and_bounds():
    cfg = ConsensusConfig(4, 1)
    assert (cfg.reply_quorum, cfg.phase_quorum) == (2, 3)
    with pytest.raises(ValueError):
        ConsensusConfig(3, 1)
    with pytest.raises(ValueError):
        ConsensusConfig(4, 1, reply_quorum=4)
    with pytest.raises(ValueError):
        ConsensusConfig(4, 1, phase_quorum=5)


def test_n4_fault_free_message_count_30():
    res = run_consensus_round(ConsensusConfig(4, 1), SimNetwork(seed=0), payload_bytes=1000)
    assert res.committed
    assert res.messages == 3 + 12 + 12 + 3 == 30


@pytest.mark.parametrize("n", [4, 7, 10, 13, 16, 31])
def test_message_count_formula(n):
    res = run_consensus_round(ConsensusConfig.for_n(n), SimNetwork(seed=n), payload_bytes=500)
    assert res.messages == fault_free_message_count(n) == (n - 1) + 2 * n * (n - 1) + (n - 1)


def test_two_silent_replicas_block_commit():
    net = SimNetwork(seed=1)
    res = run_consensus_round(ConsensusConfig(4, 1), net, payload_bytes=1000, faulty=[2, 3])
    assert not res.committed
    assert res.elapsed == pytest.approx(round_timeout(net, HEADER_BYTES + 1000))


def test_f_silent_replicas_still_commit():
    res = run_consensus_round(ConsensusConfig(7, 2), SimNetwork(seed=1), payload_bytes=1000, faulty=[3, 5])
    assert res.committed
    assert set(res.committed_nodes) == {0, 1, 2, 4, 6}


def test_silent_leader_never_commits():
    res = run_consensus_round(ConsensusConfig(4, 1), SimNetwork(), payload_bytes=10, faulty=[0])
    assert not res.committed and res.messages == 0


def test_hand_computed_two_node_round():
    # n=2, f=0, no jitter: PrePrepare (1096 B) then Prepare/Commit/Reply (160 B) on one medium
    # at 1.25 MB/s with 10 ms propagation; the follower's Reply reaches the leader at 21.2608 ms.
    net = SimNetwork(base_latency=0.01, bandwidth=1.25e6, jitter=0.0)
    res = run_consensus_round(ConsensusConfig(2, 0), net, payload_bytes=1000)
    pp = (HEADER_BYTES + 1000) / 1.25e6
    ctl = CONTROL_BYTES / 1.25e6
    assert res.elapsed == pytest.approx(pp + 0.01 + 3 * ctl + 0.01, abs=1e-15)
    assert res.elapsed == pytest.approx(0.0212608, abs=1e-12)
    assert res.messages == 6


def test_same_seed_bit_exact():
    a = run_consensus_round(ConsensusConfig.for_n(10), SimNetwork(seed=42), payload_bytes=300_000)
    b = run_consensus_round(ConsensusConfig.for_n(10), SimNetwork(seed=42), payload_bytes=300_000)
    assert a.elapsed == b.elapsed and a.messages == b.messages


def test_jitter_bounded_and_pure():
    net = SimNetwork(base_latency=0.02, jitter=0.1, seed=5)
    vals = [net.jitter_for(s, r, q) for s in range(4) for r in range(4) for q in range(50)]
    assert all(0.0 <= v <= 0.002 for v in vals)
    assert net.jitter_for(1, 2, 3) == SimNetwork(base_latency=0.02, jitter=0.1, seed=5).jitter_for(1, 2, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(4, 13))
def test_elapsed_monotone_in_payload(a, b, n):
    lo, hi = sorted((a, b))
    cfg = ConsensusConfig.for_n(n)
    e_lo = run_consensus_round(cfg, SimNetwork(seed=3), payload_bytes=lo).elapsed
    e_hi = run_consensus_round(cfg, SimNetwork(seed=3), payload_bytes=hi).elapsed
    assert e_hi >= e_lo


def test_safety_over_random_fault_schedules():
    rng = random.Random(11)
    for trial in range(20):
        n = rng.choice([4, 7, 10])
        f = (n - 1) // 3
        # the leader of view h is h % n; there is no view change, so it stays live
        schedule = {h: rng.sample([i for i in range(n) if i != h % n], rng.randint(0, f)) for h in range(1, 9)}
        engine = ConsensusEngine(n, SimNetwork(seed=trial), faulty_schedule=lambda h: schedule.get(h, ()))
        ledger = Ledger(commit_hook=engine)
        for h in range(1, 9):
            ledger.record(TxKind.SENSING_PAYMENT_REPORT, 1, {"amount": h}, "edge-0")
            ledger.seal_block(engine.leader_for(h))
        assert all(len(d) == 1 for d in engine.decided.values())
        assert sorted(engine.decided) == list(range(1, 9))


def test_engine_silent_leader_decides_nothing():
    engine = ConsensusEngine(4, SimNetwork(), faulty_schedule=lambda h: [h % 4])
    ledger = Ledger(commit_hook=engine)
    with pytest.raises(LedgerError):
        ledger.seal_block(engine.leader_for(1))
    assert engine.decided == {} and len(ledger.chain) == 1


def test_engine_rotates_leader_and_names():
    engine = ConsensusEngine(3, names=["a", "b", "c"])
    assert [engine.leader_for(h) for h in range(1, 5)] == ["b", "c", "a", "b"]
    with pytest.raises(ValueError):
        ConsensusEngine(3, names=["a"])


def test_measure_scaling_rows_and_determinism():
    pts = node_sweep([4, 7, 10])
    rows = measure_scaling(pts, seed=9)
    assert [r["n"] for r in rows] == [4, 7, 10]
    assert rows == measure_scaling(pts, seed=9, workers=3)
    assert len(measure_scaling([ScalingPoint(4, 1, 300_000)], seed=0)) == 1
    csv_text = scaling_csv(rows)
    assert csv_text.splitlines()[0] == "n,f,servers,payload_bytes,elapsed_s,messages"


def test_server_sweep_linear():
    rows = measure_scaling(server_sweep(range(1, 21)), seed=0)
    r2 = linear_fit_r2([r["servers"] for r in rows], [r["elapsed_s"] for r in rows])
    assert r2 >= 0.95


def test_node_sweep_superlinear():
    rows = measure_scaling(node_sweep([4, 7, 10, 13, 16]), seed=0)
    ratios = growth_ratios([r["elapsed_s"] for r in rows])
    assert all(b > a for a, b in zip(ratios, ratios[1:]))


def test_linear_fit_r2_oracle():
    assert linear_fit_r2([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    # y = x^2 on 0..4: Sxy=40, Sxx=10, Syy=174, r^2 = 1600/1740
    assert linear_fit_r2([0, 1, 2, 3, 4], [0, 1, 4, 9, 16]) == pytest.approx(1600 / 1740, rel=1e-12)
