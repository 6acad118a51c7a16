"""Acceptance checks 1-9.

Every check prints one ``criterion N: PASS|FAIL`` line (with the measured
quantities and wall time) and then asserts. Run ``pytest tests/test_acceptance.py -v``
or ``python3 tests/test_acceptance.py`` for the lines alone.
"""

import math
import random
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from oracles import numeric_gradient, simulate_state_frequencies, total_variation  # noqa: E402

from mcslearn.consensus import (ConsensusConfig, SimNetwork, fault_free_message_count, growth_ratios,  # noqa: E402
                                linear_fit_r2, measure_scaling, node_sweep, run_consensus_round, server_sweep)
from mcslearn.fedlearn import ModelParams, loss, loss_and_grad  # noqa: E402
from mcslearn.ledger import TxKind  # noqa: E402
from mcslearn.mechanism import (MechanismParams, closed_form_discrepancies, has_interior_max,  # noqa: E402
                                incentive_compatibility_check, is_non_increasing, optimal_server_strategy,
                                stationarity_residual, sweep)
from mcslearn.settlement import (PayoffMatrices, ZDParams, feasible_gamma_interval,  # noqa: E402
                                 linear_relation_residual, stationary_payoffs, transition_matrix, zd_strategy)
from mcslearn.simcli import fl_experiment, parse_config, run_e2e_experiment, zd_runs, run_e2e  # noqa: E402

BASE = MechanismParams(R=10, alpha_s=3, beta_s=2, epsilon=0.9, v_bar=50, s_bar=500, c_d=2)
AXIS = list(np.linspace(0, 15, 31))
PAY = PayoffMatrices((6, 3, 8, 5), (6, 8, 3, 5))


def scenario(kind, seed, extra=""):
    return parse_config(f"[scenario]\nname = acceptance-{kind}\nkind = {kind}\nseed = {seed}\n{extra}")


def report(n, ok, detail, started, limit=None):
    took = time.perf_counter() - started
    if limit is not None and took >= limit:
        ok = False
        detail += f"; runtime limit {limit:g} s exceeded"
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({took:.1f} s) {detail}"
    return ok, line


# -- the checks ---------------------------------------------------------------------

def check_1():
    t0 = time.perf_counter()
    found = closed_form_discrepancies(BASE, 0.5, AXIS, AXIS, clamp_v=False, steps=10_000)
    points = [(e, x) for e in AXIS for x in AXIS if e * x > 1]
    worst = max(abs(stationarity_residual(optimal_server_strategy(0.5, BASE.with_(eta=e, xi=x)),
                                          BASE.with_(eta=e, xi=x))) for e, x in points)
    ok = not found and worst < 1e-6
    return report(1, ok, f"{len(points)} grid points, {len(found)} beyond one grid step (s_bar/1e4), "
                         f"max |dF_d/dv| at v*(s*) = {worst:.2e}", t0, 60)


def _random_params(rng):
    while True:
        eta, xi = rng.uniform(0.2, 15), rng.uniform(0.2, 15)
        if eta * xi > 1.05:
            break
    return MechanismParams(R=rng.uniform(1, 30), alpha_s=rng.uniform(0, 5), beta_s=rng.uniform(0, 5),
                           epsilon=rng.uniform(0.05, 1.0), v_bar=rng.uniform(10, 100), s_bar=rng.uniform(100, 1000),
                           c_d=rng.uniform(0, 5), eta=eta, xi=xi, T=rng.uniform(0.5, 3))


def check_2():
    t0 = time.perf_counter()
    rng = random.Random(2024)
    violations = sum(not incentive_compatibility_check(rng.random(), [rng.random()], _random_params(rng))
                     for _ in range(1000))
    return report(2, violations == 0, f"1000 instances, {violations} violations", t0, 30)


def _trend(rows, key):
    return [r[key] for r in rows if not math.isnan(r[key])]


def check_3():
    t0 = time.perf_counter()
    sweeps = {
        "eta (xi=15)": sweep(BASE, 0.5, etas=AXIS, xis=[15.0]),
        "xi (eta=15)": sweep(BASE, 0.5, etas=[15.0], xis=AXIS),
        "epsilon (eta=xi=15)": sweep(BASE.with_(eta=15, xi=15), 0.5, epsilons=list(np.linspace(0.1, 1.0, 19))),
    }
    parts, ok = [], True
    for name, rows in sweeps.items():
        ud = is_non_increasing(_trend(rows, "U_d_max"))
        us = has_interior_max(_trend(rows, "U_s_max"))
        ok &= ud and us
        parts.append(f"{name}: U_d non-increasing={ud}, U_s interior max={us}")
    return report(3, ok, "; ".join(parts), t0)


def check_4():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = {}
    for chi in (1, 2, 5):
        _, hi = feasible_gamma_interval(chi, PAY)
        p = zd_strategy(ZDParams(chi, 0.5 * hi), PAY)
        worst[chi] = max(abs(linear_relation_residual(p, q, PAY, chi)) for q in rng.random((1000, 2)))
    ok = max(worst.values()) < 1e-9
    return report(4, ok, "max residual " + ", ".join(f"chi={c}: {w:.1e}" for c, w in worst.items()), t0, 10)


def check_5():
    t0 = time.perf_counter()
    runs = zd_runs(scenario("zd", 0))
    zd_ok = all(runs[("zd", q0)].reached(0.99) for q0 in (0.1, 0.4, 0.6, 0.9))
    tft_fails = not runs[("tft", 0.1)].reached(0.99)
    wsls_fails = not runs[("wsls", 0.1)].reached(0.99)
    utils = [(float(t.U_b[-1]), float(t.U_r[-1])) for (name, _), t in runs.items() if name == "zd"]
    util_ok = all(abs(u - 6) <= 0.2 for pair in utils for u in pair)
    ok = zd_ok and tft_fails and wsls_fails and util_ok
    detail = (f"ZD reaches 0.99 from all q0={zd_ok}; TFT fails from 0.1={tft_fails} "
              f"(terminal q {tuple(round(v, 3) for v in runs[('tft', 0.1)].terminal_q)}); "
              f"WSLS fails from 0.1={wsls_fails}; ZD terminal utilities "
              + ", ".join(f"({a:.3f}, {b:.3f})" for a, b in utils) + f" within 6+-0.2={util_ok}")
    return report(5, ok, detail, t0)


def check_6():
    t0 = time.perf_counter()
    ex = fl_experiment(scenario("fl", 0))
    fr = sorted(ex.fraction_runs)
    acc = [ex.fraction_runs[f].history[-1].test_accuracy for f in fr]
    increasing = all(b > a for a, b in zip(acc, acc[1:]))
    smallest_fails = math.isinf(ex.fraction_runs[fr[0]].rounds_to(ex.target))
    parts = sorted(ex.participant_runs)
    rounds = [ex.participant_runs[k].rounds_to(ex.target) for k in parts]
    non_decreasing = all(b >= a for a, b in zip(rounds, rounds[1:]))
    ok = increasing and smallest_fails and non_decreasing
    detail = (f"accuracy by fraction {dict(zip(fr, (round(a, 4) for a in acc)))} strictly increasing={increasing}; "
              f"smallest fraction misses target={smallest_fails}; rounds-to-target by participants "
              f"{dict(zip(parts, rounds))} non-decreasing={non_decreasing}")
    return report(6, ok, detail, t0, 300)


def check_7():
    t0 = time.perf_counter()
    srv = measure_scaling(server_sweep(range(1, 21), 10, 300_000), seed=0)
    r2 = linear_fit_r2([r["servers"] for r in srv], [r["elapsed_s"] for r in srv])
    nodes = [4, 7, 10, 13, 16]
    nod = measure_scaling(node_sweep(nodes), seed=0)
    ratios = growth_ratios([r["elapsed_s"] for r in nod])
    superlinear = all(b > a for a, b in zip(ratios, ratios[1:]))
    counts_ok = all(r["messages"] == fault_free_message_count(r["n"]) == (r["n"] - 1) + 2 * r["n"] * (r["n"] - 1)
                    + (r["n"] - 1) for r in nod)
    counts_ok &= run_consensus_round(ConsensusConfig.for_n(4), SimNetwork(), payload_bytes=1).messages == 30
    ok = r2 >= 0.95 and superlinear and counts_ok
    detail = (f"servers R^2={r2:.6f}; node growth ratios {[round(g, 5) for g in ratios]} strictly increasing="
              f"{superlinear}; message counts exact={counts_ok}")
    return report(7, ok, detail, t0, 30)


STAGE_KINDS = {
    "task_publication": {TxKind.TASK_REQUEST, TxKind.RECRUITMENT_RESULT},
    "data_submission": {TxKind.SENSING_PAYMENT_REPORT},
    "federated_learning": {TxKind.LOCAL_UPDATE_REF, TxKind.GLOBAL_MODEL_RECORD},
    "settlement": {TxKind.SETTLEMENT_RECORD, TxKind.REWARD_ALLOCATION},
}


def check_8():
    t0 = time.perf_counter()
    sc = scenario("e2e", 7)
    rep = run_e2e(sc)
    allocated = sum(rep.allocations.values())
    kinds = {tx.kind for tx in rep.ledger.task_records(rep.task_id)}
    stages_ok = all(rep.stage_records[s] > 0 and want <= kinds for s, want in STAGE_KINDS.items())
    conserved = allocated == rep.W and rep.amount_paid == rep.W
    first = run_e2e_experiment(sc)
    identical = first == run_e2e_experiment(scenario("e2e", 7))
    ok = conserved and stages_ok and identical and rep.converged
    detail = (f"W={rep.W}, allocated={allocated}, paid={rep.amount_paid}; FL converged={rep.converged} "
              f"in {rep.rounds} rounds (accuracy {rep.final_accuracy:.4f}); every stage on chain={stages_ok}; "
              f"rerun byte-identical={identical}")
    return report(8, ok, detail, t0)


def check_9():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    grad_err = 0.0
    for _ in range(20):
        f, c, n = rng.integers(1, 8), rng.integers(2, 6), rng.integers(5, 60)
        x, y = rng.normal(size=(n, f)), rng.integers(0, c, n)
        w = rng.normal(size=f * c + c)
        _, g = loss_and_grad(ModelParams(w, f, c), x, y)
        num = numeric_gradient(lambda v: loss(ModelParams(v, f, c), x, y), w)
        grad_err = max(grad_err, float(np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-12)))
    ps, qs = rng.random((50, 4)), rng.random((50, 2))
    fixed = 0.0
    pis = []
    for p, q in zip(ps, qs):
        pi = stationary_payoffs(p, q, PAY).pi
        fixed = max(fixed, float(np.max(np.abs(pi @ transition_matrix(p, q) - pi))))
        pis.append(pi)
    freq = simulate_state_frequencies(ps, qs, 1_000_000, seed=9)
    tv = max(float(total_variation(f, pi)) for f, pi in zip(freq, pis))
    ok = grad_err < 1e-4 and fixed < 1e-12 and tv < 0.01
    detail = (f"gradient rel. err {grad_err:.1e}; max |pi M - pi| {fixed:.1e}; "
              f"max TV vs 1e6-step Monte Carlo over 50 (p, q) {tv:.4f}")
    return report(9, ok, detail, t0)


CHECKS = [check_1, check_2, check_3, check_4, check_5, check_6, check_7, check_8, check_9]


@pytest.mark.slow
@pytest.mark.parametrize("check", CHECKS, ids=[f"criterion_{i}" for i in range(1, 10)])
def test_criterion(check, capsys):
    ok, line = check()
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    failed = 0
    for check in CHECKS:
        ok, line = check()
        print(line, flush=True)
        failed += not ok
    sys.exit(1 if failed else 0)
