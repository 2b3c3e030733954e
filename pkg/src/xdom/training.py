"""Dataset splitting, scenario construction, training loop, and metrics.

Scenarios: TTSD trains and tests inside a single environment realization
(one scenario seed); TTMD pools two or more realizations into every
partition, which makes the channel a nuisance variable the model has to
ride out. Splits are 70/15/15, stratified by (device, protocol), and fully
deterministic given a seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import dataio
from . import model as mdl

RATIOS = (0.70, 0.15, 0.15)
PARTITIONS = ("train", "val", "test")
MISSING_CELL = "—"  # table marker for metrics a single-task run lacks


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite mid-run."""


@dataclass
class ScenarioSplit:
    kind: str  # "TTSD" | "TTMD"
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    scenario_seeds: tuple

    def partitions(self):
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 150
    batch_size: int = 32
    lambda_f: float = 1.0
    lambda_p: float = 1.0
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lambda_f < 0 or self.lambda_p < 0 or (self.lambda_f == 0 and self.lambda_p == 0):
            raise ValueError("task weights must be >= 0 and not both zero")


@dataclass
class MetricsReport:
    top1_fingerprint: float
    confusion_fingerprint: np.ndarray
    per_class_false_alarm: np.ndarray
    top1_protocol: float | None = None
    n_frames: int = 0
    mean_loss: float | None = None

    def to_dict(self):
        return {
            "top1_fingerprint": self.top1_fingerprint,
            "top1_protocol": self.top1_protocol,
            "confusion_fingerprint": self.confusion_fingerprint.tolist(),
            "per_class_false_alarm": self.per_class_false_alarm.tolist(),
            "n_frames": self.n_frames,
            "mean_loss": self.mean_loss,
        }


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _global_targets(n, ratios=RATIOS):
    """Largest-remainder apportionment of n items to the ratio targets."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    return counts


def split_70_15_15(class_keys, seed, ratios=RATIOS):
    """Stratified 70/15/15 split of range(len(class_keys)).

    class_keys: one hashable stratification key per frame (device, protocol).
    Global partition sizes are exact (largest remainder); per-class
    proportions hold within one frame. Every class needs >= 3 frames.
    Returns (train, val, test) index arrays, deterministic given `seed`.
    """
    keys = list(class_keys)
    n = len(keys)
    groups = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    for key, members in groups.items():
        if len(members) < 3:
            raise ValueError(f"class {key!r} has only {len(members)} frames; need >= 3")

    targets = _global_targets(n, ratios)
    floors = {}
    leftovers = {}
    fractions = {}
    for key, members in groups.items():
        exact = [len(members) * r for r in ratios]
        fl = [int(np.floor(e)) for e in exact]
        floors[key] = fl
        leftovers[key] = len(members) - sum(fl)
        fractions[key] = [e - f for e, f in zip(exact, fl)]
    remaining = [t - sum(floors[k][p] for k in groups) for p, t in enumerate(targets)]

    counts = {key: list(fl) for key, fl in floors.items()}
    for key in sorted(groups, key=repr):
        order = np.argsort([-f for f in fractions[key]], kind="stable")
        assigned = 0
        for p in order:
            if assigned == leftovers[key]:
                break
            if remaining[p] > 0:
                counts[key][p] += 1
                remaining[p] -= 1
                assigned += 1
        # ratios sum to 1, so every leftover always finds an open partition

    rng = np.random.default_rng([int(seed), 0x5711])
    out = {p: [] for p in range(3)}
    for key in sorted(groups, key=repr):
        members = np.asarray(groups[key])
        members = members[rng.permutation(members.size)]
        a, b, _ = counts[key]
        out[0].extend(members[:a])
        out[1].extend(members[a : a + b])
        out[2].extend(members[a + b :])
    return tuple(np.sort(np.asarray(out[p], dtype=np.int64)) for p in range(3))


def build_scenario(manifest, kind, seeds, protocol=None, split_seed=0):
    """TTSD/TTMD partition of a manifest, optionally filtered to one protocol."""
    kind = kind.upper()
    seeds = tuple(seeds)
    if kind == "TTSD" and len(seeds) != 1:
        raise ValueError(f"TTSD uses exactly one scenario seed, got {len(seeds)}")
    if kind == "TTMD" and len(seeds) < 2:
        raise ValueError(f"TTMD pools at least two scenario seeds, got {len(seeds)}")
    if kind not in ("TTSD", "TTMD"):
        raise ValueError(f"unknown scenario kind {kind!r}")
    idx = manifest.subset(protocol=protocol, scenario_seeds=set(seeds))
    if idx.size == 0:
        raise ValueError("scenario filter selected no frames")
    labels = manifest.labels()
    keys = [(labels[i][0], labels[i][1]) for i in idx]
    tr, va, te = split_70_15_15(keys, split_seed)
    return ScenarioSplit(
        kind=kind, train=idx[tr], val=idx[va], test=idx[te], scenario_seeds=seeds
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _batches(indices, batch_size):
    for start in range(0, indices.size, batch_size):
        yield indices[start : start + batch_size]


def _batch_loss(model, inputs, idx, y_dev, y_proto, cfg, multi_task):
    probs_f, probs_p = model.forward(inputs, idx=idx)
    loss = ag.mul(ag.cross_entropy(probs_f, y_dev[idx]), ag.Tensor(np.asarray(cfg.lambda_f, dtype=probs_f.dtype)))
    if multi_task:
        loss_p = ag.mul(ag.cross_entropy(probs_p, y_proto[idx]), ag.Tensor(np.asarray(cfg.lambda_p, dtype=probs_f.dtype)))
        loss = ag.add(loss, loss_p)
    return loss, probs_f, probs_p


@dataclass
class TrainResult:
    curve: list  # rows: (epoch, train_loss, val_loss, val_acc_f, val_acc_p)
    best_state: dict
    best_epoch: int
    best_val_metric: float


def train(model, inputs, y_dev, y_proto, split, cfg):
    """SGD-with-momentum training; retains the best-validation checkpoint.

    Mini-batches are reshuffled each epoch from a seeded stream. Multi-task
    model selection uses the mean of both heads' validation accuracy,
    single-task the fingerprint accuracy alone.
    """
    multi_task = model.cfg.multi_task
    params = model.parameters()
    curve = []
    best = (-1.0, -1, None)  # (metric, epoch, state)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 0x7A17, epoch]).permutation(split.train)
        total, count = 0.0, 0
        for idx in _batches(order, cfg.batch_size):
            ag.reset_tape()
            loss, _, _ = _batch_loss(model, inputs, idx, y_dev, y_proto, cfg, multi_task)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: lr={cfg.lr} is too high for this config"
                )
            loss.backward()
            ag.sgd_momentum_step(params, cfg.lr, cfg.momentum)
            total += value * idx.size
            count += idx.size
        train_loss = total / count

        val = evaluate(model, inputs, y_dev, y_proto, split.val, batch_size=cfg.batch_size)
        val_acc_p = val.top1_protocol if multi_task else None
        metric = (
            0.5 * (val.top1_fingerprint + val.top1_protocol) if multi_task else val.top1_fingerprint
        )
        curve.append((epoch, train_loss, val.mean_loss, val.top1_fingerprint, val_acc_p))
        if metric > best[0]:
            state = {name: arr.copy() for name, arr in model.state_arrays().items()}
            best = (metric, epoch, state)
    return TrainResult(curve=curve, best_state=best[2], best_epoch=best[1], best_val_metric=best[0])


def evaluate(model, inputs, y_dev, y_proto, indices, batch_size=64):
    """Top-1 accuracies, confusion matrix, and one-vs-rest false alarms."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("evaluate called with no frames")
    n_dev = model.cfg.n_devices
    multi_task = model.cfg.multi_task
    confusion = np.zeros((n_dev, n_dev), dtype=np.int64)
    hits_p = 0
    loss_total = 0.0
    with ag.no_grad():
        for idx in _batches(indices, batch_size):
            probs_f, probs_p = model.forward(inputs, idx=idx)
            pred = probs_f.data.argmax(axis=1)
            np.add.at(confusion, (y_dev[idx], pred), 1)
            picked = np.maximum(
                probs_f.data[np.arange(idx.size), y_dev[idx]], ag.CROSS_ENTROPY_FLOOR
            )
            loss_total += float(-np.log(picked).sum())
            if multi_task:
                hits_p += int((probs_p.data.argmax(axis=1) == y_proto[idx]).sum())

    top1 = float(np.trace(confusion) / indices.size)
    fp = confusion.sum(axis=0) - np.diag(confusion)
    tn = indices.size - confusion.sum(axis=1) - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        far = np.where(fp + tn > 0, fp / np.maximum(fp + tn, 1), 0.0)
    return MetricsReport(
        top1_fingerprint=top1,
        confusion_fingerprint=confusion,
        per_class_false_alarm=far,
        top1_protocol=float(hits_p / indices.size) if multi_task else None,
        n_frames=int(indices.size),
        mean_loss=loss_total / indices.size,
    )


# ---------------------------------------------------------------------------
# Experiment orchestration (run directories)
# ---------------------------------------------------------------------------

MODES = ("stl-wifi", "stl-bt", "mtl")


def mode_protocol(mode):
    if mode == "stl-wifi":
        return "wifi"
    if mode == "stl-bt":
        return "bt"
    if mode == "mtl":
        return None
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def materialize(manifest, model):
    """Load every frame and precompute model inputs plus label arrays."""
    frames = np.stack([manifest.frame_samples(i) for i in range(len(manifest))])
    inputs = model.prepare(frames)
    labels = manifest.labels()
    y_dev = np.asarray([l[0] for l in labels], dtype=np.int64)
    y_proto = np.asarray([l[1] for l in labels], dtype=np.int64)
    return inputs, y_dev, y_proto


def scenario_seeds_for(manifest, scenario):
    if scenario.upper() == "TTSD":
        return (manifest.scenarios[0],)
    return tuple(manifest.scenarios)


def run_experiment(data_dir, out_dir, model_kind="xdom", mode="mtl", scenario="ttsd",
                   profile="reduced", cfg=None, model_seed=None):
    """synth-data in, run directory out: train, evaluate, persist artifacts.

    Writes config.json, loss_curve.csv, report.json, confusion.csv, and
    best.ckpt under out_dir. Returns the test-set MetricsReport.
    """
    cfg = cfg or TrainConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = dataio.DatasetManifest.load(Path(data_dir) / "manifest.json")

    protocol = mode_protocol(mode)
    multi_task = mode == "mtl"
    model_cfg = mdl.config_for(
        model_kind, profile, n_devices=len(manifest.devices), multi_task=multi_task,
        frame_len=manifest.frame_len,
    )
    model = mdl.build_model(model_kind, model_cfg, seed=cfg.seed if model_seed is None else model_seed)

    seeds = scenario_seeds_for(manifest, scenario)
    split = build_scenario(manifest, scenario, seeds, protocol=protocol, split_seed=cfg.seed)
    inputs, y_dev, y_proto = materialize(manifest, model)

    result = train(model, inputs, y_dev, y_proto, split, cfg)
    model.load_state(result.best_state)
    report = evaluate(model, inputs, y_dev, y_proto, split.test, batch_size=cfg.batch_size)

    _write_run_dir(out_dir, model_kind, mode, scenario, profile, cfg, model_cfg, result, report)
    return report


def _fmt(x):
    if x is None:
        return ""
    return f"{x:.9g}"


def _write_run_dir(out_dir, model_kind, mode, scenario, profile, cfg, model_cfg, result, report):
    with open(out_dir / "config.json", "w") as fh:
        json.dump(
            {
                "model": model_kind,
                "mode": mode,
                "scenario": scenario.upper(),
                "profile": profile,
                "train": {
                    "lr": cfg.lr, "momentum": cfg.momentum, "epochs": cfg.epochs,
                    "batch_size": cfg.batch_size, "lambda_f": cfg.lambda_f,
                    "lambda_p": cfg.lambda_p, "seed": cfg.seed,
                    "deterministic": cfg.deterministic,
                },
                "model_config": model_cfg.to_dict(),
            },
            fh, indent=1, sort_keys=True,
        )
    with open(out_dir / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc_f", "val_acc_p"])
        for epoch, tl, vl, af, ap in result.curve:
            writer.writerow([epoch, _fmt(tl), _fmt(vl), _fmt(af), _fmt(ap)])
    with open(out_dir / "report.json", "w") as fh:
        payload = report.to_dict()
        payload.update(
            {
                "model": model_kind, "mode": mode, "scenario": scenario.upper(),
                "profile": profile, "seed": cfg.seed,
                "best_epoch": result.best_epoch, "best_val_metric": result.best_val_metric,
            }
        )
        json.dump(payload, fh, indent=1, sort_keys=True)
    np.savetxt(out_dir / "confusion.csv", report.confusion_fingerprint, fmt="%d", delimiter=",")
    ag.save_checkpoint(out_dir / "best.ckpt", result.best_state)


# ---------------------------------------------------------------------------
# Run comparison tables
# ---------------------------------------------------------------------------

def load_report(run_dir):
    with open(Path(run_dir) / "report.json") as fh:
        return json.load(fh)


def compare_runs(reports):
    """Align run reports into comparison tables.

    Returns (fingerprint_rows, protocol_rows): the first keyed by
    (scenario, mode) x model with top-1 fingerprint accuracy, the second
    restricted to multi-task runs with both heads' accuracies.
    """
    models = sorted({r["model"] for r in reports})
    by_key = {}
    for r in reports:
        by_key.setdefault((r["scenario"], r["mode"]), {})[r["model"]] = r

    fingerprint_rows = [["scenario", "mode"] + [f"{m}_top1_fingerprint" for m in models]]
    protocol_rows = [
        ["scenario"]
        + [f"{m}_top1_protocol" for m in models]
        + [f"{m}_top1_fingerprint" for m in models]
    ]
    for (scenario, mode), group in sorted(by_key.items()):
        row = [scenario, mode]
        for m in models:
            r = group.get(m)
            row.append(_fmt(r["top1_fingerprint"]) if r else MISSING_CELL)
        fingerprint_rows.append(row)
        if mode == "mtl":
            prow = [scenario]
            for m in models:
                r = group.get(m)
                val = r.get("top1_protocol") if r else None
                prow.append(_fmt(val) if val is not None else MISSING_CELL)
            for m in models:
                r = group.get(m)
                prow.append(_fmt(r["top1_fingerprint"]) if r else MISSING_CELL)
            protocol_rows.append(prow)
    return fingerprint_rows, protocol_rows


def write_comparison(reports, out_dir):
    """Emit single-task and multi-task comparison tables as CSV + JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint_rows, protocol_rows = compare_runs(reports)
    for name, rows in (("fingerprint_table", fingerprint_rows), ("multitask_table", protocol_rows)):
        with open(out_dir / f"{name}.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    with open(out_dir / "comparison.json", "w") as fh:
        json.dump(
            {"fingerprint_table": fingerprint_rows, "multitask_table": protocol_rows},
            fh, indent=1, sort_keys=True,
        )
    return fingerprint_rows, protocol_rows
