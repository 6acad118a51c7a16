"""Scenario runner: INI configs in, CSV tables plus a manifest out.

    mcslearn run scenario.ini --out results/ [--seed N]
    mcslearn validate scenario.ini
    mcslearn list-experiments
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .consensus import (ConsensusEngine, SimNetwork, growth_ratios, linear_fit_r2, measure_scaling,
                        node_sweep, scaling_csv, server_sweep)
from .fedlearn import (METRICS_COLUMNS, DatasetShard, FLResult, TrainingConfig, make_synthetic_dataset, run_fl,
                       subsample)
from .ledger import (KeyRing, Ledger, LedgerError, Recruiter, TaskRequest, TxKind, WorkerDescriptor, export_chain,
                     select_all, top_k_by_capacity)
from .mechanism import SWEEP_COLUMNS, MechanismParams, run_submission_protocol, sweep
from .settlement import (Adaptation, AllocationRefused, PayoffMatrices, Rates, SettlementError, Trajectory,
                         ZDParams, allocate_rewards, compute_invoice, play_repeated_game, record_settlement,
                         tft_strategy, wsls_strategy, zd_strategy)

KINDS = ("mechanism", "fl", "consensus", "zd", "e2e")


class ConfigError(Exception):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line, self.column = line, column
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(where + message)


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

REQUIRED = object()


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "scenario": {
        "name": (str, REQUIRED),
        "kind": (str, REQUIRED),
        "seed": (int, REQUIRED),
    },
    "mechanism": {
        "R": (float, "10"), "alpha_s": (float, "3"), "beta_s": (float, "2"), "epsilon": (float, "0.9"),
        "v_bar": (float, "50"), "s_bar": (float, "500"), "c_d": (float, "2"),
        "eta": (float, "2"), "xi": (float, "2"), "T": (float, "1"), "theta": (float, "0.5"),
        "grid_min": (float, "0"), "grid_max": (float, "15"), "grid_points": (int, "31"),
        "fixed_other": (float, "15"),
        "epsilon_min": (float, "0.1"), "epsilon_max": (float, "1.0"), "epsilon_points": (int, "19"),
        "trend_eta": (float, "15"), "trend_xi": (float, "15"),
    },
    "fl": {
        "n_samples": (int, "10000"), "classes": (int, "10"), "features": (int, "20"),
        "separation": (float, "2.0"), "conditioning": (float, "10"), "skew": (float, "0.5"),
        "base_participants": (int, "5"), "participants": (_ints, "5,15,25"),
        "fractions": (_floats, "0.02,0.1,0.5"),
        "learning_rate": (float, "0.003"), "local_epochs": (int, "1"), "batch_size": (int, "10"),
        "max_rounds": (int, "100"), "target_accuracy": (float, "0.85"),
        "convergence_window": (int, "5"), "convergence_delta": (float, "0.001"),
        "weighting": (str, "samples"), "workers": (int, "1"),
    },
    "consensus": {
        "n": (int, "10"), "servers_min": (int, "1"), "servers_max": (int, "20"),
        "nodes": (_ints, "4,7,10,13,16"), "node_sweep_servers": (int, "10"),
        "bytes_per_server": (int, "300000"),
        "base_latency": (float, "0.01"), "bandwidth": (float, "1250000"), "jitter": (float, "0.1"),
        "workers": (int, "1"),
    },
    "zd": {
        "x": (_floats, "6,3,8,5"), "y": (_floats, "6,8,3,5"), "chi": (float, "2"), "gamma": (float, "0.1"),
        "leaders": (_words, "zd,tft,wsls"), "q0": (_floats, "0.1,0.4,0.6,0.9"), "rounds": (int, "5000"),
        "step": (float, "0.5"), "period": (int, "10"), "tremble": (float, "0.01"),
        "converge_level": (float, "0.99"),
    },
    "e2e": {
        "requestor": (str, "requestor-0"), "task_description": (str, "mcs-classification"),
        "edge_servers": (int, "5"), "recruit_k": (int, "0"), "devices_per_server": (int, "4"),
        "theta_min": (float, "0.1"), "theta_max": (float, "0.9"),
        "response_delay_mean": (float, "0.05"), "response_timeout": (float, "1.0"),
        "minor_units": (int, "100"), "w_l": (int, "50"), "w_a": (int, "200"), "w_b": (int, "100"),
        "leader_strategy": (str, "zd"), "requestor_script": (str, "adaptive"),
        "settlement_rounds": (int, "5000"),
    },
}

# sections each kind reads besides [scenario]
SECTIONS_FOR = {
    "mechanism": ("mechanism",),
    "fl": ("fl",),
    "consensus": ("consensus",),
    "zd": ("zd",),
    "e2e": ("mechanism", "fl", "zd", "e2e"),
}


@dataclass
class Scenario:
    name: str
    kind: str
    seed: int
    params: dict[str, dict[str, Any]] = field(default_factory=dict)
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    def section(self, name: str) -> dict[str, Any]:
        return self.params[name]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec, values in self.raw.items():
            cp[sec] = values
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _locate(text: str, section: str, key: str | None) -> tuple[int | None, int | None]:
    """1-based (line, column) of a section header or of a key's value."""
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no, line.index("[") + 1
            continue
        if current == section and key is not None:
            m = re.match(r"\s*([^=:\s]+)\s*[=:]\s*", line)
            if m and m.group(1) == key:
                return no, m.end() + 1
    return None, None


def parse_config(text: str, seed_override: int | None = None) -> Scenario:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("missing section header", e.lineno, 1) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        what = f"option {e.option!r}" if isinstance(e, configparser.DuplicateOptionError) else "section"
        raise ConfigError(f"duplicate {what} in [{e.section}]", e.lineno, 1) from None
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError(f"cannot parse {e.errors[0][1]}" if e.errors else "cannot parse", line, 1) from None

    for sec in cp.sections():
        if sec not in SCHEMA:
            line, col = _locate(text, sec, None)
            raise ConfigError(f"unknown section [{sec}]", line, col)
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                line, col = _locate(text, sec, key)
                raise ConfigError(f"unknown key {key!r} in [{sec}]", line, col)
    if not cp.has_section("scenario"):
        raise ConfigError("missing required section [scenario]")

    def read(sec: str) -> tuple[dict, dict]:
        values, raw = {}, {}
        for key, (conv, default) in SCHEMA[sec].items():
            if cp.has_option(sec, key):
                s = cp.get(sec, key).strip()
            elif default is REQUIRED:
                line, col = _locate(text, sec, None)
                raise ConfigError(f"missing required key {key!r} in [{sec}]", line, col)
            else:
                s = default
            try:
                values[key] = conv(s)
            except ValueError as e:
                line, col = _locate(text, sec, key)
                raise ConfigError(f"bad value for {key!r} in [{sec}]: {e}", line, col) from None
            raw[key] = s
        return values, raw

    head, head_raw = read("scenario")
    if head["kind"] not in KINDS:
        line, col = _locate(text, "scenario", "kind")
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}; got {head['kind']!r}", line, col)
    if seed_override is not None:
        head["seed"] = int(seed_override)
        head_raw["seed"] = str(int(seed_override))
    if not 0 <= head["seed"] < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")

    sc = Scenario(head["name"], head["kind"], head["seed"], raw={"scenario": head_raw})
    for sec in SECTIONS_FOR[sc.kind]:
        sc.params[sec], sc.raw[sec] = read(sec)
    return sc


def load_config(path: str | Path, seed_override: int | None = None) -> Scenario:
    return parse_config(Path(path).read_text(), seed_override)


# ---------------------------------------------------------------------------
# Module configs from scenario sections
# ---------------------------------------------------------------------------

_MECH_FIELDS = ("R", "alpha_s", "beta_s", "epsilon", "v_bar", "s_bar", "c_d", "eta", "xi", "T")


def mechanism_params(sec: dict) -> MechanismParams:
    return MechanismParams(**{k: sec[k] for k in _MECH_FIELDS})


def training_config(sec: dict) -> TrainingConfig:
    return TrainingConfig(learning_rate=sec["learning_rate"], local_epochs=sec["local_epochs"],
                          batch_size=sec["batch_size"], max_rounds=sec["max_rounds"],
                          target_accuracy=sec["target_accuracy"], convergence_window=sec["convergence_window"],
                          convergence_delta=sec["convergence_delta"], weighting=sec["weighting"])


def payoffs(sec: dict) -> PayoffMatrices:
    return PayoffMatrices(tuple(sec["x"]), tuple(sec["y"]))


def adaptation(sec: dict) -> Adaptation:
    return Adaptation(step=sec["step"], period=sec["period"], tremble=sec["tremble"])


def leader_strategy(name: str, sec: dict):
    pay = payoffs(sec)
    if name == "zd":
        return zd_strategy(ZDParams(chi=sec["chi"], gamma=sec["gamma"]), pay)
    if name == "tft":
        return tft_strategy()
    if name == "wsls":
        return wsls_strategy(pay)
    raise ValueError(f"unknown leader strategy {name!r} (expected zd, tft or wsls)")


def validate_scenario(sc: Scenario) -> None:
    """Build every module config the scenario would use; module errors propagate unchanged."""
    p = sc.params
    if "mechanism" in p:
        mechanism_params(p["mechanism"])
    if "fl" in p:
        training_config(p["fl"])
    if "zd" in p:
        payoffs(p["zd"])
        for name in p["zd"]["leaders"]:
            leader_strategy(name, p["zd"])
        adaptation(p["zd"])
    if "e2e" in p:
        e = p["e2e"]
        leader_strategy(e["leader_strategy"], p["zd"])
        if e["requestor_script"] not in ("adaptive", "always_defect", "always_cooperate"):
            raise ValueError(f"unknown requestor_script {e['requestor_script']!r}")
        if e["edge_servers"] < 1 or e["devices_per_server"] < 1:
            raise ValueError("edge_servers and devices_per_server must be >= 1")


# ---------------------------------------------------------------------------
# Table helpers
# ---------------------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.10g}"
    return str(v)


def table(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r[c]) for c in columns] if isinstance(r, dict) else [fmt(x) for x in r])
    return buf.getvalue()


def _grid(lo: float, hi: float, n: int) -> list[float]:
    return [float(v) for v in np.linspace(lo, hi, n)]


# ---------------------------------------------------------------------------
# Experiments: each returns {filename: text}
# ---------------------------------------------------------------------------


def run_mechanism(sc: Scenario) -> dict[str, str]:
    sec = sc.section("mechanism")
    base = mechanism_params(sec)
    theta = sec["theta"]
    axis = _grid(sec["grid_min"], sec["grid_max"], sec["grid_points"])
    eps = _grid(sec["epsilon_min"], sec["epsilon_max"], sec["epsilon_points"])
    other = sec["fixed_other"]
    return {
        "mechanism_grid.csv": table(SWEEP_COLUMNS, sweep(base, theta, etas=axis, xis=axis)),
        "fig3_eta.csv": table(SWEEP_COLUMNS, sweep(base, theta, etas=axis, xis=[other])),
        "fig3_xi.csv": table(SWEEP_COLUMNS, sweep(base, theta, etas=[other], xis=axis)),
        "fig4_epsilon.csv": table(SWEEP_COLUMNS, sweep(base.with_(eta=sec["trend_eta"], xi=sec["trend_xi"]),
                                                       theta, epsilons=eps)),
    }


@dataclass
class FLExperiment:
    fraction_runs: dict[float, FLResult]
    participant_runs: dict[int, FLResult]
    target: float


def fl_experiment(sc: Scenario) -> FLExperiment:
    sec = sc.section("fl")
    cfg = training_config(sec)

    def data(n_shards: int):
        return make_synthetic_dataset(sc.seed, sec["n_samples"], sec["classes"], sec["features"], n_shards,
                                      sec["skew"], sec["separation"], sec["conditioning"])

    def run(shards, test, fraction):
        # fixed-budget curves: every run uses all max_rounds rounds
        return run_fl(1, shards, cfg, test_set=test, classes=sec["classes"], seed=sc.seed,
                      data_fraction=fraction, workers=sec["workers"], early_stop=False)

    shards, test = data(sec["base_participants"])
    by_fraction = {fr: run(subsample(shards, fr), test, fr) for fr in sec["fractions"]}
    by_participants = {}
    for k in sec["participants"]:
        s, t = data(k)
        by_participants[k] = run(s, t, 1.0)
    return FLExperiment(by_fraction, by_participants, cfg.target_accuracy)


FL_SUMMARY_COLUMNS = ("sweep", "participants", "data_fraction", "final_accuracy", "rounds_to_target",
                      "reached_target")


def run_fl_experiment(sc: Scenario) -> dict[str, str]:
    ex = fl_experiment(sc)

    def curves(runs):
        rows = [[m.round, m.test_accuracy, m.train_loss, m.participants, m.data_fraction]
                for r in runs.values() for m in r.history]
        return table(METRICS_COLUMNS, rows)

    summary = []
    for name, runs in (("fraction", ex.fraction_runs), ("participants", ex.participant_runs)):
        for r in runs.values():
            last = r.history[-1]
            rt = r.rounds_to(ex.target)
            summary.append([name, last.participants, last.data_fraction, last.test_accuracy, rt,
                            not math.isinf(rt)])
    return {"fig5_fraction.csv": curves(ex.fraction_runs),
            "fig5_participants.csv": curves(ex.participant_runs),
            "fig5_summary.csv": table(FL_SUMMARY_COLUMNS, summary)}


def run_consensus_experiment(sc: Scenario) -> dict[str, str]:
    sec = sc.section("consensus")
    net = {"base_latency": sec["base_latency"], "bandwidth": sec["bandwidth"], "jitter": sec["jitter"]}
    srv = measure_scaling(server_sweep(range(sec["servers_min"], sec["servers_max"] + 1), sec["n"],
                                       sec["bytes_per_server"]), sc.seed, sec["workers"], **net)
    nod = measure_scaling(node_sweep(sec["nodes"], sec["node_sweep_servers"], sec["bytes_per_server"]),
                          sc.seed, sec["workers"], **net)
    fit = [["servers_linear_r2", linear_fit_r2([r["servers"] for r in srv], [r["elapsed_s"] for r in srv])]]
    fit += [[f"nodes_growth_ratio_{a}_{b}", g] for a, b, g in
            zip(sec["nodes"], sec["nodes"][1:], growth_ratios([r["elapsed_s"] for r in nod]))]
    return {"fig6_servers.csv": scaling_csv(srv), "fig6_nodes.csv": scaling_csv(nod),
            "fig6_fit.csv": table(("statistic", "value"), fit)}


ZD_SUMMARY_COLUMNS = ("leader", "q0", "reached", "converged_at_update", "terminal_q1", "terminal_q2",
                      "U_b_terminal", "U_r_terminal")


def zd_runs(sc: Scenario) -> dict[tuple[str, float], Trajectory]:
    sec = sc.section("zd")
    pay = payoffs(sec)
    adapt = adaptation(sec)
    out = {}
    for name in sec["leaders"]:
        leader = leader_strategy(name, sec)
        for q0 in sec["q0"]:
            out[(name, q0)] = play_repeated_game(leader, q0, adapt, sec["rounds"], seed=sc.seed, pay=pay,
                                                 converge_level=sec["converge_level"])
    return out


def run_zd_experiment(sc: Scenario) -> dict[str, str]:
    runs = zd_runs(sc)
    level = sc.section("zd")["converge_level"]
    traj = io.StringIO()
    summary = []
    first = True
    for (name, q0), t in runs.items():
        lines = t.to_csv().splitlines()
        if first:
            traj.write("leader,q0," + lines[0] + "\n")
            first = False
        for ln in lines[1:]:
            traj.write(f"{name},{fmt(q0)},{ln}\n")
        summary.append([name, q0, t.reached(level),
                        "" if t.converged_at_update is None else t.converged_at_update,
                        t.terminal_q[0], t.terminal_q[1], t.U_b[-1], t.U_r[-1]])
    return {"fig7_fig8_trajectories.csv": traj.getvalue(), "zd_summary.csv": table(ZD_SUMMARY_COLUMNS, summary)}


# ---------------------------------------------------------------------------
# End-to-end pipeline
# ---------------------------------------------------------------------------

STAGES = ("task_publication", "data_submission", "federated_learning", "settlement")


@dataclass
class PipelineReport:
    task_id: int
    final_accuracy: float
    rounds: int
    converged: bool
    W: int
    invoice: dict
    cooperative: bool
    amount_paid: int
    allocations: dict[str, int]
    allocation_refused: str | None
    stage_times: dict[str, float]
    stage_records: dict[str, int]
    submissions: list[dict]
    fl_metrics_csv: str
    chain_jsonl: str
    ledger: Ledger | None = field(default=None, repr=False)

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in ("task_id", "final_accuracy", "rounds", "converged", "W", "invoice",
                                           "cooperative", "amount_paid", "allocations", "allocation_refused",
                                           "stage_times", "stage_records", "submissions")}
        return json.dumps(d, sort_keys=True, indent=2) + "\n"


def run_e2e(sc: Scenario) -> PipelineReport:
    """Task publication, data submission, federated learning, then settlement and allocation."""
    p = sc.params
    e, fl, zd = p["e2e"], p["fl"], p["zd"]
    rng = np.random.default_rng(sc.seed)
    servers = [f"edge-{i}" for i in range(e["edge_servers"])]
    keys = KeyRing(sc.seed)
    engine = ConsensusEngine(len(servers), SimNetwork(seed=sc.seed), names=servers)
    times: dict[str, float] = {}
    counts: dict[str, int] = {}

    def seal() -> None:
        ledger.seal_block(engine.leader_for(ledger.chain.tip.height + 1))

    def stage(name: str):
        def wrap(fn):
            t0 = engine.elapsed_total
            n0 = sum(1 for _ in ledger.chain.transactions())
            try:
                out = fn()
            except Exception as exc:  # noqa: BLE001 - surfaced with the stage name
                raise StageError(name, exc) from exc
            times[name] = times.get(name, 0.0) + engine.elapsed_total - t0
            counts[name] = sum(1 for _ in ledger.chain.transactions()) - n0
            return out
        return wrap

    shards, test = make_synthetic_dataset(sc.seed, fl["n_samples"], fl["classes"], fl["features"], len(servers),
                                          fl["skew"], fl["separation"], fl["conditioning"], owners=servers)
    policy = top_k_by_capacity(e["recruit_k"]) if e["recruit_k"] > 0 else select_all
    candidates = [WorkerDescriptor(s.owner, len(s)) for s in shards]
    ledger = Ledger(keys, Recruiter(candidates, policy), commit_hook=engine)

    # (1) task publication and recruitment
    @stage("task_publication")
    def task_id():
        tid = ledger.publish_task(TaskRequest(e["requestor"], e["task_description"], fl["target_accuracy"]))
        seal()   # TaskRequest; the recruitment contract fires on commit
        seal()   # RecruitmentResult
        result = ledger.recruitments[tid]
        if not result.ok:
            raise RuntimeError(f"recruitment failed: {result.reason}")
        return tid

    recruited = set(ledger.recruitments[task_id].workers)

    # (2) devices submit sensing data to their edge server under the game rule
    submissions: list[dict] = []

    @stage("data_submission")
    def kept_shards():
        mech = mechanism_params(p["mechanism"])
        kept = []
        slowest = 0.0
        for shard in shards:
            if shard.owner not in recruited:
                continue
            theta = float(rng.uniform(e["theta_min"], e["theta_max"]))
            chunks = np.array_split(np.arange(len(shard)), e["devices_per_server"])
            rows = []
            for d, idx in enumerate(chunks):
                delay = float(rng.exponential(e["response_delay_mean"]))
                out = run_submission_protocol(mech, theta, timeout=e["response_timeout"], response_delay=delay)
                amount = int(round(out.payment * e["minor_units"])) if out.accepted else 0
                submissions.append({"server": shard.owner, "device": d, "theta": theta, "accepted": out.accepted,
                                    "s_star": out.s_star, "v_star": out.v_star, "amount": amount,
                                    "reason": out.reason})
                slowest = max(slowest, min(delay, e["response_timeout"]))
                if out.accepted:
                    rows.extend(idx)
                    ledger.record(TxKind.SENSING_PAYMENT_REPORT, task_id,
                                  {"device": f"{shard.owner}/device-{d}", "amount": amount,
                                   "s_star": out.s_star, "v_star": out.v_star}, shard.owner)
            if rows:
                rows = np.asarray(rows)
                kept.append(DatasetShard(shard.features[rows], shard.labels[rows], shard.owner))
        seal()
        engine.net.clock += slowest
        times["data_submission"] = slowest
        if not kept:
            raise RuntimeError("no device accepted the game rule")
        return kept

    # (3) blockchain-based federated learning
    @stage("federated_learning")
    def fl_result():
        return run_fl(task_id, kept_shards, training_config(fl), ledger, engine, test_set=test,
                      classes=fl["classes"], seed=sc.seed, workers=fl["workers"])

    # (4) payment settlement and reward allocation
    settle: dict[str, Any] = {}

    @stage("settlement")
    def invoice():
        pay = payoffs(zd)
        leader = leader_strategy(e["leader_strategy"], zd)
        script = e["requestor_script"]
        if script == "adaptive":
            traj = play_repeated_game(leader, min(zd["q0"]), adaptation(zd), e["settlement_rounds"],
                                      seed=sc.seed, pay=pay, converge_level=zd["converge_level"])
        else:
            q = 0.0 if script == "always_defect" else 1.0
            traj = play_repeated_game(leader, q, None, e["settlement_rounds"], seed=sc.seed, pay=pay)
        cooperative = min(traj.terminal_q) >= zd["converge_level"]
        inv = compute_invoice(ledger, task_id, Rates(e["w_l"], e["w_a"], e["w_b"]))
        paid = inv.W if cooperative else 0
        record_settlement(ledger, inv, paid, e["requestor"], cooperative)
        seal()
        try:
            allocate_rewards(inv, ledger)
            seal()
            settle["refused"] = None
        except AllocationRefused as exc:
            settle["refused"] = str(exc)
        settle.update(cooperative=cooperative, paid=paid)
        return inv

    allocations: dict[str, int] = {}
    for tx in ledger.task_records(task_id):
        if tx.kind is TxKind.REWARD_ALLOCATION:
            allocations[tx.payload["recipient"]] = allocations.get(tx.payload["recipient"], 0) + tx.payload["amount"]

    return PipelineReport(
        task_id=task_id, final_accuracy=fl_result.accuracy, rounds=fl_result.rounds, converged=fl_result.converged,
        W=invoice.W,
        invoice={"sensing_total": invoice.sensing_total, "n_local": invoice.n_local, "n_agg": invoice.n_agg,
                 "n_blocks": invoice.n_blocks, "w_l": e["w_l"], "w_a": e["w_a"], "w_b": e["w_b"]},
        cooperative=settle["cooperative"], amount_paid=settle["paid"], allocations=allocations,
        allocation_refused=settle["refused"], stage_times={s: times.get(s, 0.0) for s in STAGES},
        stage_records={s: counts.get(s, 0) for s in STAGES}, submissions=submissions,
        fl_metrics_csv=fl_result.metrics_csv(), chain_jsonl=export_chain(ledger.chain), ledger=ledger)


def run_e2e_experiment(sc: Scenario) -> dict[str, str]:
    rep = run_e2e(sc)
    sub_cols = ("server", "device", "theta", "accepted", "s_star", "v_star", "amount", "reason")
    return {
        "e2e_report.json": rep.to_json(),
        "e2e_stages.csv": table(("stage", "sim_time_s", "records"),
                                [[s, rep.stage_times[s], rep.stage_records[s]] for s in STAGES]),
        "e2e_allocations.csv": table(("recipient", "amount"), sorted(rep.allocations.items())),
        "e2e_submissions.csv": table(sub_cols, [[r[c] for c in sub_cols] for r in rep.submissions]),
        "e2e_fl_metrics.csv": rep.fl_metrics_csv,
        "chain.jsonl": rep.chain_jsonl,
    }


EXPERIMENTS: dict[str, tuple[Callable[[Scenario], dict[str, str]], str]] = {
    "mechanism": (run_mechanism, "Figs. 3-4 analog: maximized utilities over (eta, xi) and epsilon"),
    "fl": (run_fl_experiment, "Fig. 5 analog: accuracy vs. data fraction and participant count"),
    "consensus": (run_consensus_experiment, "Fig. 6 analog: PBFT elapsed time vs. servers and nodes"),
    "zd": (run_zd_experiment, "Figs. 7-8 analog: ZD/TFT/WSLS leaders vs. an adaptive requestor"),
    "e2e": (run_e2e_experiment, "Full pipeline: publication, submission, FL, settlement"),
}


# ---------------------------------------------------------------------------
# Running and manifest
# ---------------------------------------------------------------------------


def manifest(sc: Scenario, config_text: str, outputs: dict[str, str]) -> str:
    m = {
        "artifact": "mcslearn",
        "version": __version__,
        "scenario": sc.name,
        "kind": sc.kind,
        "seed": sc.seed,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "parameters": sc.raw,
        "outputs": {name: hashlib.sha256(body.encode()).hexdigest() for name, body in sorted(outputs.items())},
    }
    return json.dumps(m, sort_keys=True, indent=2) + "\n"


def config_from_manifest(text: str) -> str:
    """INI text reproducing the run recorded in a manifest."""
    m = json.loads(text)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec, values in m["parameters"].items():
        cp[sec] = values
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def run_scenario(config_path: str | Path, out_dir: str | Path, seed: int | None = None) -> dict[str, str]:
    text = Path(config_path).read_text()
    sc = parse_config(text, seed)
    validate_scenario(sc)
    outputs = EXPERIMENTS[sc.kind][0](sc)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, body in outputs.items():
        (out / name).write_text(body)
    (out / "manifest.json").write_text(manifest(sc, text, outputs))
    return outputs


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="mcslearn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario and write CSV tables")
    r.add_argument("config")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    v = sub.add_parser("validate", help="parse and check a scenario config")
    v.add_argument("config")
    sub.add_parser("list-experiments", help="show experiment kinds")
    args = ap.parse_args(argv)

    if args.command == "list-experiments":
        for kind, (_, desc) in EXPERIMENTS.items():
            print(f"{kind:10s} {desc}")
        return 0
    try:
        if args.command == "validate":
            sc = load_config(args.config)
            validate_scenario(sc)
            print(f"ok: {sc.name} ({sc.kind}, seed {sc.seed})")
            return 0
        outputs = run_scenario(args.config, args.out, args.seed)
    except ConfigError as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 3
    except (ValueError, SettlementError, LedgerError) as exc:
        # module errors (infeasible parameters) are surfaced verbatim
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    for name in sorted(outputs):
        print(f"wrote {Path(args.out) / name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
