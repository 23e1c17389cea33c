"""End-to-end pipelines behind the command line: train, attack, probe, sweep.

Everything here is a deterministic function of a :class:`RunConfig`. Wall-clock
times are kept in a separate ``timing`` block so that two runs with the same
config and seed write byte-identical metrics and report contents otherwise.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import AdversarialBatch, AttackReport, evaluate_attack, export_batch
from .checkpoint import load_network, save_network
from .config import RunConfig
from .data import Dataset, load_idx, partition as partition_data, synth_task
from .engine import Network, accuracy, build_network
from .probes import ProbeReport, run_probes
from .protocol import Channel, SplitModel, partition, train_honest
from .shadow import ShadowConfig, ShadowState, init_shadow, train_shadow

METRICS_VERSION = "splitattack-metrics v1"
REPORT_SCHEMA = "splitattack-report/1"
SWEEP_VERSION = "splitattack-sweep v1"
CHECKPOINT_NAMES = ("theta1", "theta2", "theta3")
SHADOW_NAME = "shadow"
# offsets keeping the test split and model init independent of the training data stream
TEST_SEED_OFFSET = 1000
MODEL_SEED_OFFSET = 0


class MissingArtifactError(FileNotFoundError):
    """A checkpoint or report that a later stage depends on does not exist."""


@dataclass
class TaskData:
    shards: list[Dataset]
    pool: Dataset
    test: Dataset


@dataclass
class TrainResult:
    model: SplitModel
    shadow: ShadowState | None
    losses: list[float]
    wall_clock: float

    @property
    def sim_losses(self) -> list[float]:
        return list(self.shadow.sim_history) if self.shadow is not None else []


def build_data(cfg: RunConfig) -> TaskData:
    t = cfg.task
    if t.idx_images is not None:
        train = load_idx(t.idx_images, t.idx_labels, t.classes)
        test = load_idx(t.idx_test_images, t.idx_test_labels, t.classes)
    else:
        train = synth_task(t.synth_spec(), cfg.seed)
        test = synth_task(t.synth_spec(test=True), cfg.seed + TEST_SEED_OFFSET)
    shards, pool = partition_data(train, cfg.partition_plan())
    return TaskData(shards, pool, test)


def build_model(cfg: RunConfig, input_shape) -> SplitModel:
    net = build_network(tuple(input_shape), cfg.model.layers, seed=cfg.seed + MODEL_SEED_OFFSET)
    return partition(net, cfg.model.plan(), lr=cfg.training.lr, momentum=cfg.training.momentum)


def shadow_config(cfg: RunConfig, pool: Dataset) -> ShadowConfig:
    s = cfg.shadow
    return ShadowConfig(alpha=s.alpha, shadow_arch=s.shadow_arch, shadow_lr=s.shadow_lr,
                        attacker_dataset=pool, seed=cfg.seed)


def train(cfg: RunConfig, data: TaskData | None = None, channel: Channel | None = None) -> TrainResult:
    """Split training under ``cfg``: malicious-server shadow training if enabled, else honest."""
    cfg.validate()
    data = data if data is not None else build_data(cfg)
    model = build_model(cfg, data.shards[0].sample_shape)
    tr = cfg.training
    start = time.perf_counter()
    if cfg.shadow.enabled:
        scfg = shadow_config(cfg, data.pool)
        state = init_shadow(scfg, model)
        losses, state = train_shadow(model, data.shards, tr.rounds, scfg, state, tr.batch_size, cfg.seed, channel)
    else:
        state = None
        losses = train_honest(model, data.shards, tr.rounds, tr.batch_size, cfg.seed, channel)
    return TrainResult(model, state, losses, time.perf_counter() - start)


def proxy_network(shadow_net: Network, server_net: Network) -> Network:
    return Network(shadow_net.layers + server_net.layers)


def attack(cfg: RunConfig, full: Network, proxy: Network, test: Dataset) -> tuple[AttackReport, AdversarialBatch]:
    return evaluate_attack(full, test, proxy, cfg.attack.to_attack_config(), seed=cfg.seed)


def probe_set(cfg: RunConfig, data: TaskData) -> np.ndarray:
    """Finite stand-in for the whole input space: the head of the test set plus the attacker pool."""
    n = cfg.probes.probe_samples
    parts = [data.test.images[:n]]
    if len(data.pool):
        parts.append(data.pool.images[:n])
    return np.concatenate(parts)


def probe(cfg: RunConfig, nets: dict[str, Network], data: TaskData, x_adv: np.ndarray | None = None) -> ProbeReport:
    return run_probes(nets["theta1"], nets[SHADOW_NAME], nets["theta2"], nets["theta3"], data.test,
                      probe_set(cfg, data), cfg.attack.to_attack_config(), x_adv)


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------


def model_nets(result: TrainResult) -> dict[str, Network]:
    m = result.model
    nets = {"theta1": m.input.net, "theta2": m.server.net, "theta3": m.output.net}
    if result.shadow is not None:
        nets[SHADOW_NAME] = result.shadow.net
    return nets


def save_checkpoints(nets: dict[str, Network], out_dir) -> None:
    ck = Path(out_dir) / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    for name, net in nets.items():
        save_network(net, ck / f"{name}.slnn")


def load_checkpoints(out_dir, need_shadow: bool = True) -> dict[str, Network]:
    ck = Path(out_dir) / "checkpoints"
    names = CHECKPOINT_NAMES + ((SHADOW_NAME,) if need_shadow else ())
    nets = {}
    for name in names:
        path = ck / f"{name}.slnn"
        if not path.is_file():
            raise MissingArtifactError(f"missing checkpoint {path}")
        nets[name] = load_network(path)
    return nets


def full_network(nets: dict[str, Network]) -> Network:
    return Network(nets["theta1"].layers + nets["theta2"].layers + nets["theta3"].layers)


def write_metrics(path, losses: Sequence[float], sim_losses: Sequence[float]) -> None:
    """Per-round CSV; the first line names the schema version."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {METRICS_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(["round", "task_loss", "sim_loss"])
        for t, loss in enumerate(losses):
            sim = repr(float(sim_losses[t])) if t < len(sim_losses) else ""
            w.writerow([t, repr(float(loss)), sim])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# {METRICS_VERSION}":
            raise ValueError(f"{path}: unexpected metrics header {first!r}")
        return list(csv.DictReader(fh))


def window_means(values: Sequence[float], window: int = 100) -> list[float]:
    v = np.asarray(values, dtype=float)
    return [float(v[i : i + window].mean()) for i in range(0, len(v), window)]


def read_report(out_dir) -> dict:
    path = Path(out_dir) / "report.json"
    if not path.is_file():
        return {"schema": REPORT_SCHEMA}
    return json.loads(path.read_text())


def write_report(out_dir, report: dict) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def training_summary(cfg: RunConfig, result: TrainResult, test: Dataset) -> dict:
    full = result.model.full_network()
    return {
        "rounds": cfg.training.rounds,
        "final_task_loss": result.losses[-1] if result.losses else None,
        "clean_accuracy": accuracy(full, test.images, test.labels),
        "sim_loss_window_means": window_means(result.sim_losses),
        "shadow_enabled": cfg.shadow.enabled,
    }


# --------------------------------------------------------------------------
# pipelines
# --------------------------------------------------------------------------


def run_train(cfg: RunConfig, out_dir) -> TrainResult:
    """Train and write checkpoints, ``metrics.csv`` and the training block of ``report.json``."""
    data = build_data(cfg)
    result = train(cfg, data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoints(model_nets(result), out)
    write_metrics(out / "metrics.csv", result.losses, result.sim_losses)
    report = {
        "schema": REPORT_SCHEMA,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "training": training_summary(cfg, result, data.test),
        "timing": {"train_wall_clock_s": result.wall_clock},
    }
    write_report(out, report)
    return result


def run_attack(cfg: RunConfig, out_dir) -> AttackReport:
    nets = load_checkpoints(out_dir)
    data = build_data(cfg)
    start = time.perf_counter()
    rep, adv = attack(cfg, full_network(nets), proxy_network(nets[SHADOW_NAME], nets["theta2"]), data.test)
    export_batch(adv, Path(out_dir) / "adv", cfg.attack.to_attack_config(), cfg.seed)
    report = read_report(out_dir)
    report.update(seed=cfg.seed, config=cfg.to_dict(), attack=rep.to_dict())
    report.setdefault("timing", {})["attack_wall_clock_s"] = time.perf_counter() - start
    write_report(out_dir, report)
    return rep


def run_probe(cfg: RunConfig, out_dir) -> ProbeReport:
    nets = load_checkpoints(out_dir)
    data = build_data(cfg)
    start = time.perf_counter()
    rep = probe(cfg, nets, data)
    report = read_report(out_dir)
    report.update(seed=cfg.seed, config=cfg.to_dict(), probes=rep.to_dict())
    report.setdefault("timing", {})["probe_wall_clock_s"] = time.perf_counter() - start
    write_report(out_dir, report)
    return rep


def evaluate_run(cfg: RunConfig, data: TaskData | None = None) -> dict:
    """Train, attack and (optionally) probe in memory; returns one flat result row."""
    data = data if data is not None else build_data(cfg)
    result = train(cfg, data)
    nets = model_nets(result)
    full = result.model.full_network()
    row = {"seed": cfg.seed, "clean_accuracy": accuracy(full, data.test.images, data.test.labels)}
    if result.shadow is None:
        return row
    rep, adv = attack(cfg, full, proxy_network(result.shadow.net, nets["theta2"]), data.test)
    row.update(rep.to_dict())
    if cfg.probes.enabled:
        row.update(probe(cfg, nets, data, adv.x_adv).to_dict())
    sim = result.sim_losses
    row["sim_loss_first"] = sim[0] if sim else None
    row["sim_loss_last_window"] = window_means(sim)[-1] if sim else None
    return row


def sweep(cfg: RunConfig, param: str, values: Sequence, seeds: Sequence[int], progress=None) -> list[dict]:
    """Every (value, seed) combination of one dotted config field; one row per run."""
    rows = []
    for value in values:
        for seed in seeds:
            run_cfg = cfg.replace(**{param: value, "seed": int(seed)})
            run_cfg.validate()
            row = {"param": param, "value": value, **evaluate_run(run_cfg)}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


SUMMARY_FIELDS = ("clean_accuracy", "accuracy_drop", "random_noise_drop", "alignment_cos", "d_hat", "sign_fraction")


def summarize(rows: Sequence[dict], fields: Sequence[str] = SUMMARY_FIELDS) -> list[dict]:
    """Median of each field over seeds, per swept value (in first-seen order)."""
    order: list = []
    groups: dict = {}
    for r in rows:
        key = r["value"]
        if key not in groups:
            order.append(key)
            groups[key] = []
        groups[key].append(r)
    out = []
    for key in order:
        g = groups[key]
        entry = {"param": g[0]["param"], "value": key, "n_seeds": len(g)}
        for f in fields:
            vals = [r[f] for r in g if r.get(f) is not None]
            entry[f] = statistics.median(vals) if vals else None
        out.append(entry)
    return out


def write_sweep(out_dir, rows: Sequence[dict], summary: Sequence[dict]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["param", "value", "n_seeds", *SUMMARY_FIELDS]
    with open(out / "sweep.csv", "w", newline="") as fh:
        fh.write(f"# {SWEEP_VERSION}\n")
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for s in summary:
            w.writerow({k: ("" if s.get(k) is None else s[k]) for k in cols})
    (out / "sweep.json").write_text(json.dumps({"runs": list(rows), "summary": list(summary)},
                                               indent=2, sort_keys=True) + "\n")


def format_table(summary: Sequence[dict], fields: Sequence[str] = SUMMARY_FIELDS) -> str:
    """Plain-text table, one row per swept value."""
    head = ["value", *fields]
    lines = ["  ".join(f"{h:>17}" for h in head)]
    for s in summary:
        cells = [f"{s['value']!s:>17}"]
        for f in fields:
            v = s.get(f)
            cells.append(f"{'-':>17}" if v is None else f"{v:>17.4f}")
        lines.append("  ".join(cells))
    return "\n".join(lines)
