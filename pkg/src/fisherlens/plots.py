"""Figure rendering for metric tables.

Every renderer takes rows already read from a metrics CSV (as a mapping
from column name to numpy array) and draws to an SVG file.  Lines carry
stable SVG group ids of the form ``series_<label>_<column>`` so a figure
can be checked structurally without rasterizing it.  When a log10 column
contains values at the probability floor, the figure gains a footnote
noting the clamp.
"""

from __future__ import annotations

import math

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .divergences import EPS_PROB  # noqa: E402
from .errors import FormatError  # noqa: E402

PLOT_KINDS = ("acc_cckl_loss", "fisher_trajectory", "nat_vs_adv_overlay")

CLAMP_FOOTNOTE = "* log10 values clamped at the 1e-12 probability floor"

_LOG_FLOOR = math.log10(EPS_PROB)


def _col(table: dict, name: str, label: str) -> np.ndarray:
    if name not in table:
        raise FormatError(f"column {name!r} missing from metrics for run {label!r}")
    return np.asarray(table[name], dtype=np.float64)


def _gid(label: str, column: str) -> str:
    safe = "".join(ch if ch.isalnum() else "_" for ch in label)
    return f"series_{safe}_{column}"


def _maybe_clamp_footnote(fig, tables):
    clamped = any(
        np.any(np.asarray(t.get("log10_avg_fisher_fro", ()), dtype=np.float64)
               <= _LOG_FLOOR + 1e-9)
        for _, t in tables)
    if clamped:
        fig.text(0.01, 0.01, CLAMP_FOOTNOTE, fontsize=7, alpha=0.8)
    return clamped


def render_acc_cckl_loss(tables, out_path) -> None:
    """Accuracy on the left axis, cross-entropy and cross-label KL on a
    log-scaled right axis, one panel for the first run in ``tables``."""
    label, table = tables[0]
    epochs = _col(table, "epoch", label)
    fig, ax_left = plt.subplots(figsize=(6.4, 4.2))
    ax_right = ax_left.twinx()

    line_acc, = ax_left.plot(epochs, _col(table, "test_acc", label),
                             color="tab:blue", label="test accuracy")
    line_acc.set_gid(_gid(label, "test_acc"))
    line_ce, = ax_right.plot(epochs, _col(table, "test_ce_loss", label),
                             color="tab:red", label="test cross-entropy")
    line_ce.set_gid(_gid(label, "test_ce_loss"))
    line_kl, = ax_right.plot(epochs, _col(table, "test_cckl_sym", label),
                             color="tab:green", label="cross-label KL")
    line_kl.set_gid(_gid(label, "test_cckl_sym"))

    ax_right.set_yscale("log")
    ax_left.set_xlabel("epoch")
    ax_left.set_ylabel("accuracy")
    ax_right.set_ylabel("loss / divergence (log scale)")
    ax_left.set_title(f"accuracy and divergence trajectories ({label})")
    lines = [line_acc, line_ce, line_kl]
    ax_left.legend(lines, [ln.get_label() for ln in lines], loc="center right",
                   fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def render_fisher_trajectory(tables, out_path) -> None:
    """Accuracy (left) against log10 mean Fisher norm (right) per run."""
    fig, ax_left = plt.subplots(figsize=(6.4, 4.2))
    ax_right = ax_left.twinx()
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    lines = []
    for i, (label, table) in enumerate(tables):
        epochs = _col(table, "epoch", label)
        color = colors[i % len(colors)]
        acc_line, = ax_left.plot(epochs, _col(table, "test_acc", label),
                                 color=color, linestyle="--",
                                 label=f"{label} accuracy")
        acc_line.set_gid(_gid(label, "test_acc"))
        fro_line, = ax_right.plot(
            epochs, _col(table, "log10_avg_fisher_fro", label),
            color=color, linestyle="-", label=f"{label} log10 Fisher norm")
        fro_line.set_gid(_gid(label, "log10_avg_fisher_fro"))
        lines += [acc_line, fro_line]
    ax_left.set_xlabel("epoch")
    ax_left.set_ylabel("accuracy (dashed)")
    ax_right.set_ylabel("log10 mean Fisher Frobenius norm (solid)")
    ax_left.set_title("information growth against accuracy")
    ax_left.legend(lines, [ln.get_label() for ln in lines], fontsize=8,
                   loc="lower right")
    _maybe_clamp_footnote(fig, tables)
    fig.tight_layout(rect=(0, 0.03, 1, 1))
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def render_nat_vs_adv_overlay(tables, out_path) -> None:
    """Overlay of Fisher norm trajectories and PGD robustness across runs,
    meant for one naturally trained and one adversarially trained run."""
    if len(tables) < 2:
        raise FormatError("nat_vs_adv_overlay needs at least two runs")
    fig, (ax_fro, ax_rob) = plt.subplots(1, 2, figsize=(9.6, 4.2))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, (label, table) in enumerate(tables):
        epochs = _col(table, "epoch", label)
        color = colors[i % len(colors)]
        fro_line, = ax_fro.plot(
            epochs, _col(table, "log10_avg_fisher_fro", label),
            color=color, label=label)
        fro_line.set_gid(_gid(label, "log10_avg_fisher_fro"))
        rob_line, = ax_rob.plot(epochs, _col(table, "adv_acc_pgd", label),
                                color=color, label=label)
        rob_line.set_gid(_gid(label, "adv_acc_pgd"))
        clean_line, = ax_rob.plot(epochs, _col(table, "test_acc", label),
                                  color=color, linestyle="--",
                                  label=f"{label} clean")
        clean_line.set_gid(_gid(label, "test_acc"))
    ax_fro.set_xlabel("epoch")
    ax_fro.set_ylabel("log10 mean Fisher Frobenius norm")
    ax_fro.set_title("input-space information")
    ax_fro.legend(fontsize=8)
    ax_rob.set_xlabel("epoch")
    ax_rob.set_ylabel("accuracy")
    ax_rob.set_title("robust (solid) and clean (dashed) accuracy")
    ax_rob.legend(fontsize=8)
    _maybe_clamp_footnote(fig, tables)
    fig.tight_layout(rect=(0, 0.03, 1, 1))
    fig.savefig(out_path, format="svg")
    plt.close(fig)


_RENDERERS = {
    "acc_cckl_loss": render_acc_cckl_loss,
    "fisher_trajectory": render_fisher_trajectory,
    "nat_vs_adv_overlay": render_nat_vs_adv_overlay,
}


def render(kind: str, tables, out_path) -> None:
    """Draw one figure of the given kind from (label, columns) pairs."""
    if kind not in _RENDERERS:
        raise FormatError(f"unknown plot kind {kind!r}, expected one of {PLOT_KINDS}")
    if not tables:
        raise FormatError("no metric tables given to render")
    _RENDERERS[kind](list(tables), out_path)
