"""Experiment orchestration: the train, eval, sweep, and plot commands.

Each command takes one TOML config.  Training writes a metrics CSV with a
pinned column set (plus a small companion CSV for auxiliary columns), a
final checkpoint, and a manifest recording the config hash, schema and
checkpoint versions, wall clock, and whether the run diverged.  All file
writes go through a temp-then-rename step so a crash never leaves a
half-written table, and an output directory is held by a lockfile while a
run owns it.

Reruns of the same config and seed reproduce the CSVs byte for byte;
table renderers only ever read numbers back from the CSVs.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import replace

import numpy as np

from .attacks import AttackConfig, robust_accuracy
from .config import (SYNTH_DATASET_KINDS, ResolvedConfig, arch_from_fields,
                     load_config)
from .data import (Dataset, ProtoSpec, StripeSpec, SynthSpec, generate,
                   load_idx, make_proto_dataset, make_stripe_dataset, split)
from .divergences import EPS_PROB, cckl_from_probs
from .errors import ConfigError, FormatError, StateError
from .fisher import fisher_batch_stats
from .network import (CHECKPOINT_FORMAT_VERSION, forward_batch,
                      load_checkpoint)
from .plots import render
from .tensor_core import substream, substream_seed
from .training import MetricRecord, TrainResult, run_training

METRICS_SCHEMA_VERSION = 1

METRICS_COLUMNS = ("epoch", "train_loss", "test_acc", "test_cckl_sym",
                   "avg_fisher_fro", "log10_avg_fisher_fro", "avg_lambda_max",
                   "adv_acc_pgd", "adv_acc_cw", "lin_bound_violations")

EXTRA_COLUMNS = ("epoch", "test_ce_loss", "lr", "adv_acc_fgsm")

SWEEP_COLUMNS = ("arch", "n_params", "clean_acc", "adv_acc_pgd", "adv_acc_cw")

METRICS_BASENAME = "metrics.csv"
EXTRA_BASENAME = "metrics_extra.csv"
MANIFEST_BASENAME = "manifest.json"
LOCK_BASENAME = ".lock"


def _fmt_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        raise FormatError(f"boolean cell {value!r} has no CSV encoding")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def atomic_write_text(path, text: str):
    """Write whole-file content through a same-directory temp file."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise FormatError(f"row width {len(row)} does not match header "
                              f"width {len(columns)}")
        lines.append(",".join(_fmt_cell(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_metrics_csv(path) -> dict:
    """One metrics table as {column: float64 array}; ragged rows are errors."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise FormatError(f"{path}: empty metrics file") from None
            rows = list(reader)
    except FileNotFoundError:
        raise FormatError(f"metrics file not found: {path}") from None
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise FormatError(f"{path}: row {i + 2} has {len(row)} cells, "
                              f"header has {len(header)}")
    out = {}
    for j, name in enumerate(header):
        try:
            out[name] = np.array([float(r[j]) for r in rows], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}: non-numeric cell in column {name!r}: "
                              f"{exc}") from None
    return out


def load_run_table(csv_path) -> dict:
    """A metrics table merged with its companion extras, when present."""
    table = read_metrics_csv(csv_path)
    extra_path = os.path.join(os.path.dirname(os.path.abspath(csv_path)),
                              EXTRA_BASENAME)
    if os.path.exists(extra_path):
        extra = read_metrics_csv(extra_path)
        if "epoch" in table and "epoch" in extra:
            if (table["epoch"].shape != extra["epoch"].shape
                    or np.any(table["epoch"] != extra["epoch"])):
                raise FormatError(
                    f"{extra_path}: epoch column disagrees with {csv_path}")
        for name, colvals in extra.items():
            table.setdefault(name, colvals)
    return table


class RunLock:
    """Exclusive ownership of an output directory via an O_EXCL lockfile."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, LOCK_BASENAME)

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StateError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lockfile if that run is dead") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


def build_dataset(res: ResolvedConfig) -> tuple[Dataset, Dataset]:
    """Construct and split the configured dataset.

    Synthesis and splitting draw from the "data" substream of the run seed
    (indices 0 and 1), so the same seed always sees the same samples no
    matter how other components are configured.
    """
    d = res.dataset
    if d is None:
        raise ConfigError("this command needs a [dataset] section")
    gen_seed = substream_seed(res.seed, "data", 0)
    split_seed = substream_seed(res.seed, "data", 1)
    kind = d["kind"]
    if kind in SYNTH_DATASET_KINDS:
        ds = generate(SynthSpec(kind=kind, n_per_class=d["n_per_class"],
                                noise_std=d["noise_std"],
                                separation=d["separation"], seed=gen_seed))
    elif kind == "stripe_images":
        scales = d.get("amplitude_scales")
        cycles = d["cycles"]
        ds = make_stripe_dataset(StripeSpec(
            n_per_class=d["n_per_class"], image_size=d["image_size"],
            cycles=cycles if isinstance(cycles, int) else tuple(cycles),
            amplitude=d["amplitude"],
            amplitude_spread=d["amplitude_spread"],
            amplitude_scales=None if scales is None else tuple(scales),
            brightness_step=d["brightness_step"],
            brightness_jitter=d["brightness_jitter"],
            noise_std=d["noise_std"], layout=d["layout"], seed=gen_seed))
    elif kind == "prototype_clusters":
        ds = make_proto_dataset(ProtoSpec(
            n_per_class=d["n_per_class"],
            contrasts=tuple(tuple(r) for r in d["contrasts"]),
            image_size=d["image_size"], noise_std=d["noise_std"],
            brightness_jitter=d["brightness_jitter"],
            sign_flip=d["sign_flip"], seed=gen_seed))
    else:
        ds = load_idx(d["images"], d["labels"], d.get("limit"))
    return split(ds, d["train_fraction"], seed=split_seed)


def _require_out(res: ResolvedConfig) -> str:
    if not res.out_dir:
        raise ConfigError("no output directory: set experiment.out_dir "
                          "or pass --out")
    return res.out_dir


def _records_rows(records, columns):
    return [[getattr(r, c) for c in columns] for r in records]


def write_metric_tables(out_dir, records: list[MetricRecord]):
    write_csv(os.path.join(out_dir, METRICS_BASENAME), METRICS_COLUMNS,
              _records_rows(records, METRICS_COLUMNS))
    write_csv(os.path.join(out_dir, EXTRA_BASENAME), EXTRA_COLUMNS,
              _records_rows(records, EXTRA_COLUMNS))


def _manifest(res: ResolvedConfig, command: str, out_dir, started: float,
              extra: dict) -> dict:
    # lazy import: the package root re-exports this module
    from . import __version__
    manifest = {
        "command": command,
        "name": res.name,
        "seed": res.seed,
        "config_hash": res.config_hash(),
        "artifact_versions": {
            "fisherlens": __version__,
            "metrics_schema": METRICS_SCHEMA_VERSION,
            "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
        },
        "wall_clock": {
            "started_unix": round(started, 3),
            "finished_unix": round(time.time(), 3),
            "seconds": round(time.time() - started, 3),
        },
    }
    manifest.update(extra)
    atomic_write_text(os.path.join(out_dir, MANIFEST_BASENAME),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _train_one(res: ResolvedConfig, out_dir, arch_fields: dict) -> tuple[TrainResult, dict]:
    train_ds, test_ds = build_dataset(res)
    arch = arch_from_fields(arch_fields, train_ds.dim)
    if arch.layer_widths[-1] != train_ds.num_classes:
        raise ConfigError(
            f"architecture emits {arch.layer_widths[-1]} classes but the "
            f"dataset has {train_ds.num_classes}")
    result = run_training(train_ds, test_ds, arch, res.train, res.eval_plan,
                          out_dir=out_dir)
    write_metric_tables(out_dir, result.records)
    extra = {
        "csv_path": METRICS_BASENAME,
        "extra_csv_path": EXTRA_BASENAME,
        "checkpoint_paths": [os.path.relpath(p, out_dir)
                             for p in result.checkpoint_paths],
        "diverged": result.diverged,
        "diverged_epoch": result.diverged_epoch,
        "n_train": train_ds.n_samples,
        "n_test": test_ds.n_samples,
        "dataset_warnings": list(train_ds.warnings),
    }
    return result, extra


def cmd_train(config_path, out_dir=None, seed=None) -> dict:
    """Train one network per the config; returns the manifest."""
    res = load_config(config_path, seed, out_dir)
    if not res.has_training:
        raise ConfigError("the train command needs a [training] section")
    if res.arch_fields is None:
        raise ConfigError("the train command needs an [architecture] section")
    out = _require_out(res)
    os.makedirs(out, exist_ok=True)
    started = time.time()
    with RunLock(out):
        result, extra = _train_one(res, out, res.arch_fields)
        manifest = _manifest(res, "train", out, started, extra)
    if result.diverged:
        print(f"run diverged at epoch {result.diverged_epoch}; "
              f"recorded {len(result.records)} completed epochs")
    return manifest


def evaluate_checkpoint(res: ResolvedConfig, checkpoint_path) -> dict:
    """Clean, attacked, and geometric summaries of one stored network."""
    net = load_checkpoint(checkpoint_path)
    _, test_ds = build_dataset(res)
    if net.arch.input_dim != test_ds.dim:
        raise FormatError(
            f"checkpoint expects {net.arch.input_dim} input features but "
            f"the dataset has {test_ds.dim}")
    if net.arch.layer_widths[-1] != test_ds.num_classes:
        raise FormatError(
            f"checkpoint emits {net.arch.layer_widths[-1]} classes but the "
            f"dataset has {test_ds.num_classes}")
    plan = res.eval_plan
    probs = forward_batch(net, test_ds.xs)
    pred = np.argmax(probs, axis=1)
    clean_acc = float(np.mean(pred == test_ds.ys))
    true_p = probs[np.arange(test_ds.n_samples), test_ds.ys]
    ce = float(np.mean(-np.log(np.maximum(true_p, EPS_PROB))))
    cckl_value = cckl_from_probs(probs, test_ds.ys, plan.pair_plan)

    probe_rng = substream(res.seed, "probe")
    n_probe = min(plan.probe_count, test_ds.n_samples)
    probe_idx = np.sort(probe_rng.choice(test_ds.n_samples, size=n_probe,
                                         replace=False))
    fstats = fisher_batch_stats(net, test_ds.xs[probe_idx], plan.power_tol,
                                plan.power_max_iter,
                                rng=substream(res.seed, "probe", 1))

    attack_cfgs = {
        "pgd": (plan.pgd_attack, 10_000),
        "cw": (plan.cw_attack, 20_000),
        "fgsm": (plan.fgsm_attack, 0),
        "fisher_eig": (AttackConfig(
            epsilon=plan.pgd_attack.epsilon, num_steps=1,
            loss_kind="cross_entropy", clip_range=plan.pgd_attack.clip_range,
            random_start=False), 30_000),
    }
    robust = {}
    for name in res.eval_attacks:
        cfg, offset = attack_cfgs[name]
        cfg = replace(cfg, rng_seed=substream_seed(res.seed, "attack", offset))
        kind = "pgd" if name == "cw" else name
        robust[name] = robust_accuracy(net, test_ds.xs, test_ds.ys, cfg, kind)

    mean_cr = fstats.mean_cr_ratio
    return {
        "checkpoint": str(checkpoint_path),
        "dataset": test_ds.name,
        "n_test": test_ds.n_samples,
        "clean_acc": clean_acc,
        "test_ce_loss": ce,
        "mean_cckl_sym": cckl_value,
        "mean_fisher_fro": fstats.avg_fro,
        "mean_lambda_max": fstats.avg_lambda_max,
        "mean_cramer_rao_ratio": None if not np.isfinite(mean_cr) else mean_cr,
        "robust_acc": robust,
        "config_hash": res.config_hash(),
        "seed": res.seed,
    }


def cmd_eval(config_path, out_dir=None, seed=None) -> dict:
    """Evaluate a stored checkpoint; writes report.json when an output
    directory is configured, and always returns the report."""
    res = load_config(config_path, seed, out_dir)
    if res.eval_checkpoint is None:
        raise ConfigError("the eval command needs an [eval] section with a "
                          "checkpoint path")
    report = evaluate_checkpoint(res, res.eval_checkpoint)
    if res.out_dir:
        os.makedirs(res.out_dir, exist_ok=True)
        atomic_write_text(os.path.join(res.out_dir, "report.json"),
                          json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _arch_param_count(fields: dict, input_dim: int) -> int:
    dims = [input_dim] + list(fields["layer_widths"])
    return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


def sweep_table_text(rows) -> str:
    """Fixed-width text rendering of the sweep summary rows."""
    headers = SWEEP_COLUMNS
    cells = [[str(r[0]), str(r[1])] + [f"{v:.4f}" for v in r[2:]] for r in rows]
    widths = [max(len(h), *(len(c[j]) for c in cells))
              for j, h in enumerate(headers)]
    def line(parts):
        lead = parts[0].ljust(widths[0])
        rest = "  ".join(p.rjust(w) for p, w in zip(parts[1:], widths[1:]))
        return f"{lead}  {rest}".rstrip()
    return "\n".join([line(list(headers))] + [line(c) for c in cells]) + "\n"


def cmd_sweep_complexity(config_path, out_dir=None, seed=None) -> dict:
    """Train every architecture in [[sweep.architectures]] under a shared
    KL-regularized schedule and tabulate final clean and attacked accuracy.

    Each architecture gets its own subdirectory with the usual run outputs;
    the summary table is assembled from the final rows of those CSVs, so
    every printed number traces back to a stored cell.
    """
    res = load_config(config_path, seed, out_dir)
    if res.sweep_archs is None:
        raise ConfigError("the sweep command needs a [[sweep.architectures]] list")
    if not res.has_training:
        raise ConfigError("the sweep command needs a [training] section")
    if res.train.regime != "trades":
        raise ConfigError("the complexity sweep compares architectures under "
                          "the KL-regularized regime; set training.regime = "
                          "\"trades\"")
    out = _require_out(res)
    os.makedirs(out, exist_ok=True)
    started = time.time()
    rows = []
    arch_dirs = {}
    diverged = {}
    with RunLock(out):
        for fields in res.sweep_archs:
            name = fields["name"]
            sub = os.path.join(out, name)
            os.makedirs(sub, exist_ok=True)
            member_started = time.time()
            result, extra = _train_one(res, sub, fields)
            _manifest(res, "sweep_member", sub, member_started,
                      {**extra, "architecture": name})
            arch_dirs[name] = name
            diverged[name] = result.diverged
            table = read_metrics_csv(os.path.join(sub, METRICS_BASENAME))
            if table["epoch"].size == 0:
                raise StateError(f"architecture {name!r} recorded no epochs")
            input_dim = result.net.arch.input_dim
            rows.append([name, _arch_param_count(fields, input_dim),
                         float(table["test_acc"][-1]),
                         float(table["adv_acc_pgd"][-1]),
                         float(table["adv_acc_cw"][-1])])
        write_csv(os.path.join(out, "sweep.csv"), SWEEP_COLUMNS, rows)
        text = sweep_table_text(rows)
        atomic_write_text(os.path.join(out, "sweep.txt"), text)
        manifest = _manifest(res, "sweep", out, started, {
            "csv_path": "sweep.csv",
            "table_path": "sweep.txt",
            "architectures": arch_dirs,
            "diverged": diverged,
        })
    print(text, end="")
    return manifest


def cmd_plot(config_path, out_dir=None, seed=None) -> str:
    """Render the configured figure; returns the SVG path."""
    res = load_config(config_path, seed, out_dir)
    if res.plot is None:
        raise ConfigError("the plot command needs a [plot] section")
    spec = res.plot
    labels = spec["labels"]
    if labels is None:
        labels = [os.path.basename(os.path.dirname(os.path.abspath(p))) or
                  os.path.splitext(os.path.basename(p))[0]
                  for p in spec["csvs"]]
    tables = [(label, load_run_table(path))
              for label, path in zip(labels, spec["csvs"])]
    out = res.out_dir or "."
    os.makedirs(out, exist_ok=True)
    out_name = spec["out_name"] or f"{spec['kind']}.svg"
    out_path = os.path.join(out, out_name)
    render(spec["kind"], tables, out_path)
    return out_path
