"""Experiment configuration: a strict TOML grammar with hard errors on
unknown keys, resolution of defaults, and a canonical content hash.

The grammar has five command-relevant sections: [experiment], [dataset],
[architecture] (or [[sweep.architectures]]), [training] (with an optional
[training.inner_attack] subtable), and [evaluation]; the eval and plot
commands add [eval] and [plot].  Architectures never declare an input
dimension; it always comes from the dataset.

All randomness flows from the single experiment seed through named
substreams: dataset synthesis and splitting draw from "data", and the
trainer derives "init", "shuffle", "attack", and "probe" from the same
seed.  The config hash is the SHA-256 of the canonical JSON of every
semantically meaningful resolved field; output location and run name stay
out of it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import tomli

from .attacks import AttackConfig
from .data import STRIPE_LAYOUTS
from .divergences import PairSamplingPlan
from .errors import ConfigError
from .network import Architecture
from .training import (EPS_DEFAULT, STEP_DEFAULT, EvalPlan, TrainConfig,
                       default_inner_attack)

SYNTH_DATASET_KINDS = ("two_gaussians", "two_moons", "concentric_rings")
DATASET_KINDS = SYNTH_DATASET_KINDS + ("stripe_images", "prototype_clusters", "idx")

PLOT_KINDS = ("acc_cckl_loss", "fisher_trajectory", "nat_vs_adv_overlay")

EVAL_ATTACKS = ("pgd", "cw", "fgsm", "fisher_eig")

_EXPERIMENT_KEYS = {"name", "seed", "out_dir"}
_DATASET_COMMON_KEYS = {"kind", "train_fraction"}
_DATASET_KIND_KEYS = {
    "two_gaussians": {"n_per_class", "noise_std", "separation"},
    "two_moons": {"n_per_class", "noise_std", "separation"},
    "concentric_rings": {"n_per_class", "noise_std", "separation"},
    "stripe_images": {"n_per_class", "image_size", "cycles", "amplitude",
                      "amplitude_spread", "amplitude_scales",
                      "brightness_step", "brightness_jitter", "noise_std",
                      "layout"},
    "prototype_clusters": {"n_per_class", "image_size", "contrasts",
                           "noise_std", "brightness_jitter", "sign_flip"},
    "idx": {"images", "labels", "limit"},
}
_ARCH_KEYS = {"layer_widths", "activation", "activation_mask"}
_SWEEP_ARCH_KEYS = _ARCH_KEYS | {"name"}
_TRAINING_KEYS = {"epochs", "batch_size", "lr", "momentum", "weight_decay",
                  "lr_decay_epochs", "lr_decay_factor", "regime",
                  "trades_inv_lambda", "checkpoint_every", "inner_attack"}
_INNER_ATTACK_KEYS = {"epsilon", "step_size", "num_steps"}
_EVALUATION_KEYS = {"max_pairs", "probe_count", "epsilon", "step_size",
                    "pgd_steps", "cw_c", "power_tol", "power_max_iter"}
_EVAL_KEYS = {"checkpoint", "attacks"}
_PLOT_KEYS = {"kind", "csvs", "labels", "out_name"}
_TOP_KEYS = {"experiment", "dataset", "architecture", "training",
             "evaluation", "eval", "sweep", "plot"}


def _check_keys(table: dict, allowed: set, where: str):
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{where}]")


def _need(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"missing required key {key!r} in [{where}]")
    return table[key]


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return value


def _as_float(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


def _as_str(value, where: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class ResolvedConfig:
    """Typed view of one config file with all defaults applied."""

    name: str
    seed: int
    out_dir: str | None
    dataset: dict | None
    arch_fields: dict | None
    sweep_archs: tuple[dict, ...] | None
    train: TrainConfig
    eval_plan: EvalPlan
    eval_checkpoint: str | None
    eval_attacks: tuple[str, ...]
    plot: dict | None
    semantic: dict
    has_training: bool

    def config_hash(self) -> str:
        canon = json.dumps(self.semantic, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def architecture(self, input_dim: int) -> Architecture:
        if self.arch_fields is None:
            raise ConfigError("this command needs an [architecture] section")
        return arch_from_fields(self.arch_fields, input_dim)


def arch_from_fields(fields: dict, input_dim: int) -> Architecture:
    """Architecture from resolved config fields plus the data dimension."""
    mask = fields.get("activation_mask")
    return Architecture(
        input_dim=input_dim,
        layer_widths=tuple(fields["layer_widths"]),
        activation=fields.get("activation", "relu"),
        activation_mask=None if mask is None else tuple(mask),
    )


def _resolve_dataset(raw: dict) -> dict:
    kind = _as_str(_need(raw, "kind", "dataset"), "dataset.kind")
    if kind not in DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {kind!r}")
    _check_keys(raw, _DATASET_COMMON_KEYS | _DATASET_KIND_KEYS[kind], "dataset")
    out = {"kind": kind,
           "train_fraction": _as_float(raw.get("train_fraction", 0.85),
                                       "dataset.train_fraction")}
    if kind in SYNTH_DATASET_KINDS:
        out["n_per_class"] = _as_int(_need(raw, "n_per_class", "dataset"),
                                     "dataset.n_per_class")
        out["noise_std"] = _as_float(raw.get("noise_std", 0.1), "dataset.noise_std")
        out["separation"] = _as_float(raw.get("separation", 2.0), "dataset.separation")
    elif kind == "stripe_images":
        out["n_per_class"] = _as_int(_need(raw, "n_per_class", "dataset"),
                                     "dataset.n_per_class")
        out["image_size"] = _as_int(raw.get("image_size", 12), "dataset.image_size")
        cycles = raw.get("cycles", 4)
        if isinstance(cycles, list):
            if not cycles or any(isinstance(c, bool) or not isinstance(c, int)
                                 for c in cycles):
                raise ConfigError("dataset.cycles must be an integer or integer list")
            out["cycles"] = list(cycles)
        else:
            out["cycles"] = _as_int(cycles, "dataset.cycles")
        out["amplitude"] = _as_float(raw.get("amplitude", 0.30), "dataset.amplitude")
        out["amplitude_spread"] = _as_float(raw.get("amplitude_spread", 0.0),
                                            "dataset.amplitude_spread")
        out["brightness_step"] = _as_float(raw.get("brightness_step", 0.025),
                                           "dataset.brightness_step")
        out["brightness_jitter"] = _as_float(raw.get("brightness_jitter", 0.035),
                                             "dataset.brightness_jitter")
        out["noise_std"] = _as_float(raw.get("noise_std", 0.06), "dataset.noise_std")
        if "amplitude_scales" in raw:
            scales = raw["amplitude_scales"]
            if (not isinstance(scales, list) or not scales
                    or any(isinstance(s, bool) or not isinstance(s, (int, float))
                           for s in scales)):
                raise ConfigError("dataset.amplitude_scales must be a nonempty number list")
            out["amplitude_scales"] = [float(s) for s in scales]
        layout = _as_str(raw.get("layout", "half_pairs"), "dataset.layout")
        if layout not in STRIPE_LAYOUTS:
            raise ConfigError(
                f"dataset.layout must be one of {STRIPE_LAYOUTS}, got {layout!r}")
        out["layout"] = layout
    elif kind == "prototype_clusters":
        out["n_per_class"] = _as_int(_need(raw, "n_per_class", "dataset"),
                                     "dataset.n_per_class")
        rows = _need(raw, "contrasts", "dataset")
        if (not isinstance(rows, list) or not rows
                or any(not isinstance(r, list) or not r for r in rows)
                or any(isinstance(v, bool) or not isinstance(v, (int, float))
                       for r in rows for v in r)):
            raise ConfigError(
                "dataset.contrasts must be a nonempty list of nonempty number lists")
        out["contrasts"] = [[float(v) for v in r] for r in rows]
        out["image_size"] = _as_int(raw.get("image_size", 12), "dataset.image_size")
        out["noise_std"] = _as_float(raw.get("noise_std", 0.10), "dataset.noise_std")
        out["brightness_jitter"] = _as_float(raw.get("brightness_jitter", 0.02),
                                             "dataset.brightness_jitter")
        sign_flip = raw.get("sign_flip", False)
        if not isinstance(sign_flip, bool):
            raise ConfigError("dataset.sign_flip must be a boolean")
        out["sign_flip"] = sign_flip
    else:
        out["images"] = _as_str(_need(raw, "images", "dataset"), "dataset.images")
        out["labels"] = _as_str(_need(raw, "labels", "dataset"), "dataset.labels")
        if "limit" in raw:
            out["limit"] = _as_int(raw["limit"], "dataset.limit")
    return out


def _resolve_arch_fields(raw: dict, where: str) -> dict:
    widths = _need(raw, "layer_widths", where)
    if (not isinstance(widths, list) or not widths
            or any(isinstance(w, bool) or not isinstance(w, int) for w in widths)):
        raise ConfigError(f"{where}.layer_widths must be a nonempty integer list")
    out = {"layer_widths": list(widths),
           "activation": _as_str(raw.get("activation", "relu"), f"{where}.activation")}
    if "activation_mask" in raw:
        mask = raw["activation_mask"]
        if not isinstance(mask, list) or any(not isinstance(m, bool) for m in mask):
            raise ConfigError(f"{where}.activation_mask must be a boolean list")
        out["activation_mask"] = list(mask)
    else:
        out["activation_mask"] = None
    return out


def _resolve_training(raw: dict, seed: int, feature_range) -> TrainConfig:
    _check_keys(raw, _TRAINING_KEYS, "training")
    inner_raw = raw.get("inner_attack")
    regime = _as_str(raw.get("regime", "natural"), "training.regime")
    inner = None
    if inner_raw is not None:
        _check_keys(inner_raw, _INNER_ATTACK_KEYS, "training.inner_attack")
        base = default_inner_attack(regime if regime != "natural" else "pgd_at",
                                    clip_range=feature_range)
        inner = AttackConfig(
            epsilon=_as_float(inner_raw.get("epsilon", EPS_DEFAULT),
                              "training.inner_attack.epsilon"),
            step_size=_as_float(inner_raw.get("step_size", STEP_DEFAULT),
                                "training.inner_attack.step_size"),
            num_steps=_as_int(inner_raw.get("num_steps", 10),
                              "training.inner_attack.num_steps"),
            loss_kind=base.loss_kind,
            clip_range=feature_range,
            random_start=False,
        )
    decay = raw.get("lr_decay_epochs", [30, 45])
    if not isinstance(decay, list) or any(isinstance(d, bool) or not isinstance(d, int)
                                          for d in decay):
        raise ConfigError("training.lr_decay_epochs must be an integer list")
    try:
        return TrainConfig(
            epochs=_as_int(_need(raw, "epochs", "training"), "training.epochs"),
            batch_size=_as_int(raw.get("batch_size", 128), "training.batch_size"),
            lr=_as_float(raw.get("lr", 0.1), "training.lr"),
            momentum=_as_float(raw.get("momentum", 0.9), "training.momentum"),
            weight_decay=_as_float(raw.get("weight_decay", 1e-4),
                                   "training.weight_decay"),
            lr_decay_epochs=tuple(decay),
            lr_decay_factor=_as_float(raw.get("lr_decay_factor", 0.1),
                                      "training.lr_decay_factor"),
            regime=regime,
            trades_inv_lambda=_as_float(raw.get("trades_inv_lambda", 5.0),
                                        "training.trades_inv_lambda"),
            inner_attack=inner,
            seed=seed,
            checkpoint_every=_as_int(raw.get("checkpoint_every", 0),
                                     "training.checkpoint_every"),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [training] values: {exc}") from exc


def _resolve_evaluation(raw: dict, seed: int, feature_range) -> EvalPlan:
    _check_keys(raw, _EVALUATION_KEYS, "evaluation")
    max_pairs = _as_int(raw.get("max_pairs", 10_000), "evaluation.max_pairs")
    eps = _as_float(raw.get("epsilon", EPS_DEFAULT), "evaluation.epsilon")
    step = _as_float(raw.get("step_size", STEP_DEFAULT), "evaluation.step_size")
    steps = _as_int(raw.get("pgd_steps", 20), "evaluation.pgd_steps")
    cw_c = _as_float(raw.get("cw_c", 500.0), "evaluation.cw_c")
    try:
        return EvalPlan(
            pair_plan=PairSamplingPlan(
                max_pairs=None if max_pairs == 0 else max_pairs, seed=seed),
            probe_count=_as_int(raw.get("probe_count", 256), "evaluation.probe_count"),
            pgd_attack=AttackConfig(epsilon=eps, step_size=step, num_steps=steps,
                                    loss_kind="cross_entropy",
                                    clip_range=feature_range),
            cw_attack=AttackConfig(epsilon=eps, step_size=step, num_steps=steps,
                                   loss_kind="cw", cw_c=cw_c,
                                   clip_range=feature_range),
            fgsm_attack=AttackConfig(epsilon=eps, num_steps=1,
                                     loss_kind="cross_entropy",
                                     clip_range=feature_range,
                                     random_start=False),
            power_tol=_as_float(raw.get("power_tol", 1e-8), "evaluation.power_tol"),
            power_max_iter=_as_int(raw.get("power_max_iter", 1000),
                                   "evaluation.power_max_iter"),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [evaluation] values: {exc}") from exc


def _resolve_plot(raw: dict) -> dict:
    _check_keys(raw, _PLOT_KEYS, "plot")
    kind = _as_str(_need(raw, "kind", "plot"), "plot.kind")
    if kind not in PLOT_KINDS:
        raise ConfigError(f"plot.kind must be one of {PLOT_KINDS}, got {kind!r}")
    csvs = _need(raw, "csvs", "plot")
    if not isinstance(csvs, list) or not csvs or any(not isinstance(c, str) for c in csvs):
        raise ConfigError("plot.csvs must be a nonempty list of paths")
    labels = raw.get("labels")
    if labels is not None:
        if (not isinstance(labels, list) or len(labels) != len(csvs)
                or any(not isinstance(s, str) for s in labels)):
            raise ConfigError("plot.labels must be a string list matching plot.csvs")
    out_name = raw.get("out_name")
    if out_name is not None:
        out_name = _as_str(out_name, "plot.out_name")
    return {"kind": kind, "csvs": list(csvs), "labels": labels, "out_name": out_name}


def resolve(raw: dict, seed_override: int | None = None,
            out_override: str | None = None) -> ResolvedConfig:
    """Validate a parsed config and apply defaults and CLI overrides."""
    _check_keys(raw, _TOP_KEYS, "top level")
    exp = raw.get("experiment", {})
    _check_keys(exp, _EXPERIMENT_KEYS, "experiment")
    name = _as_str(exp.get("name", "run"), "experiment.name")
    seed = _as_int(exp.get("seed", 0), "experiment.seed")
    if seed_override is not None:
        seed = seed_override
    out_dir = exp.get("out_dir")
    if out_dir is not None:
        out_dir = _as_str(out_dir, "experiment.out_dir")
    if out_override is not None:
        out_dir = out_override

    dataset = _resolve_dataset(raw["dataset"]) if "dataset" in raw else None
    feature_range = (0.0, 1.0)

    arch_fields = None
    if "architecture" in raw:
        _check_keys(raw["architecture"], _ARCH_KEYS, "architecture")
        arch_fields = _resolve_arch_fields(raw["architecture"], "architecture")

    sweep_archs = None
    if "sweep" in raw:
        _check_keys(raw["sweep"], {"architectures"}, "sweep")
        entries = _need(raw["sweep"], "architectures", "sweep")
        if not isinstance(entries, list) or len(entries) < 2:
            raise ConfigError("sweep.architectures must list at least 2 architectures")
        resolved_entries = []
        for i, entry in enumerate(entries):
            where = f"sweep.architectures[{i}]"
            _check_keys(entry, _SWEEP_ARCH_KEYS, where)
            fields = _resolve_arch_fields(entry, where)
            fields["name"] = _as_str(_need(entry, "name", where), f"{where}.name")
            resolved_entries.append(fields)
        names = [e["name"] for e in resolved_entries]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate architecture names in sweep: {names}")
        sweep_archs = tuple(resolved_entries)

    has_training = "training" in raw
    train = _resolve_training(raw.get("training", {"epochs": 1}), seed, feature_range)
    eval_plan = _resolve_evaluation(raw.get("evaluation", {}), seed, feature_range)

    eval_checkpoint = None
    eval_attacks = EVAL_ATTACKS
    if "eval" in raw:
        _check_keys(raw["eval"], _EVAL_KEYS, "eval")
        eval_checkpoint = _as_str(_need(raw["eval"], "checkpoint", "eval"),
                                  "eval.checkpoint")
        if "attacks" in raw["eval"]:
            attacks = raw["eval"]["attacks"]
            if (not isinstance(attacks, list) or not attacks
                    or any(a not in EVAL_ATTACKS for a in attacks)):
                raise ConfigError(f"eval.attacks entries must be among {EVAL_ATTACKS}")
            eval_attacks = tuple(attacks)

    plot = _resolve_plot(raw["plot"]) if "plot" in raw else None

    semantic = {
        "seed": seed,
        "dataset": dataset,
        "architecture": arch_fields,
        "sweep_architectures": list(sweep_archs) if sweep_archs else None,
        "training": {
            "epochs": train.epochs, "batch_size": train.batch_size,
            "lr": train.lr, "momentum": train.momentum,
            "weight_decay": train.weight_decay,
            "lr_decay_epochs": list(train.lr_decay_epochs),
            "lr_decay_factor": train.lr_decay_factor, "regime": train.regime,
            "trades_inv_lambda": train.trades_inv_lambda,
            "checkpoint_every": train.checkpoint_every,
            "inner_attack": None if train.inner_attack is None else {
                "epsilon": train.inner_attack.epsilon,
                "step_size": train.inner_attack.step_size,
                "num_steps": train.inner_attack.num_steps,
            },
        },
        "evaluation": {
            "max_pairs": eval_plan.pair_plan.max_pairs,
            "probe_count": eval_plan.probe_count,
            "epsilon": eval_plan.pgd_attack.epsilon,
            "step_size": eval_plan.pgd_attack.step_size,
            "pgd_steps": eval_plan.pgd_attack.num_steps,
            "cw_c": eval_plan.cw_attack.cw_c,
            "power_tol": eval_plan.power_tol,
            "power_max_iter": eval_plan.power_max_iter,
        },
        "eval_checkpoint": eval_checkpoint,
        "eval_attacks": list(eval_attacks),
        "plot": plot,
    }
    return ResolvedConfig(
        name=name, seed=seed, out_dir=out_dir, dataset=dataset,
        arch_fields=arch_fields, sweep_archs=sweep_archs, train=train,
        eval_plan=eval_plan, eval_checkpoint=eval_checkpoint,
        eval_attacks=tuple(eval_attacks), plot=plot, semantic=semantic,
        has_training=has_training,
    )


def load_config(path, seed_override: int | None = None,
                out_override: str | None = None) -> ResolvedConfig:
    return resolve(load_toml(path), seed_override, out_override)
