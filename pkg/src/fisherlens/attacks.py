"""Adversarial example generation under an L-infinity budget.

Four attacks: single-step FGSM, iterative PGD with selectable ascent
objective (cross-entropy, KL from the clean output, or a CW-style logit
margin), and a one-shot move along the dominant eigenvector of the
input-space Fisher information.

All attacks return points satisfying both the epsilon-ball constraint around
the clean input and the data clip range, exactly.  A budget of 0 makes every
attack the identity map.  Batched variants operate on [N, d] inputs and are
the primitives the training and evaluation loops use; the single-input
functions wrap batches of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .divergences import EPS_PROB, kl_rows
from .errors import ContractError, DimensionError
from .fisher import adversarial_divergence, fisher_at, fisher_spectral
from .network import (Network, forward_batch, forward_with_record,
                      input_gradient_from_dlogits)
from .tensor_core import make_rng, substream

LOSS_KINDS = ("cross_entropy", "kl_from_clean", "cw")

CW_C_DEFAULT = 500.0
CW_KAPPA = 0.0


@dataclass(frozen=True)
class AttackConfig:
    """L-infinity attack parameters.

    epsilon may be 0, which turns any attack into the identity map (used by
    sanity checks).  step_size and num_steps only matter for pgd; cw_c only
    for the margin objective; rng_seed seeds the uniform random start when
    random_start is on.
    """

    epsilon: float
    step_size: float = 2.0 / 255.0
    num_steps: int = 20
    loss_kind: str = "cross_entropy"
    cw_c: float = CW_C_DEFAULT
    clip_range: tuple[float, float] = (0.0, 1.0)
    rng_seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.num_steps < 1:
            raise ContractError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.step_size < 0:
            raise ContractError(f"step_size must be >= 0, got {self.step_size}")
        lo, hi = self.clip_range
        if not lo < hi:
            raise ContractError(f"clip_range must satisfy lo < hi, got {self.clip_range}")
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(
                f"unknown loss_kind {self.loss_kind!r}, expected one of {LOSS_KINDS}"
            )


@dataclass(frozen=True)
class AttackResult:
    """One attacked input.  loss_trace records the maximized objective at the
    start point and after every step; success means the predicted label
    differs from the attack's target notion (the true label when one was
    given, otherwise the clean prediction)."""

    x_adv: np.ndarray
    loss_trace: tuple[float, ...]
    success: bool


def _check_xy(net: Network, xs: np.ndarray, ys: np.ndarray | None):
    if xs.ndim != 2 or xs.shape[1] != net.arch.input_dim:
        raise DimensionError(
            f"expected batch of shape [N, {net.arch.input_dim}], got {xs.shape}"
        )
    if ys is not None and ys.shape != (xs.shape[0],):
        raise DimensionError(f"labels shape {ys.shape} does not match batch {xs.shape}")


def _project(x_adv: np.ndarray, x_clean: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    x_adv = np.clip(x_adv, x_clean - cfg.epsilon, x_clean + cfg.epsilon)
    lo, hi = cfg.clip_range
    return np.clip(x_adv, lo, hi)


def _objective_and_dlogits(net: Network, x_adv: np.ndarray, ys: np.ndarray | None,
                           cfg: AttackConfig, p_clean: np.ndarray | None):
    """Per-sample maximized objective and its logits cotangent at x_adv."""
    record = forward_with_record(net, x_adv)
    probs = record.probs
    logits = record.preacts[-1]
    n = probs.shape[1]
    if cfg.loss_kind == "cross_entropy":
        rows = np.arange(x_adv.shape[0])
        obj = -np.log(np.maximum(probs[rows, ys], EPS_PROB))
        dlogits = probs.copy()
        dlogits[rows, ys] -= 1.0
    elif cfg.loss_kind == "kl_from_clean":
        obj = kl_rows(p_clean, probs)
        dlogits = probs - p_clean
    else:
        if n < 2:
            raise ContractError("margin objective needs at least 2 classes")
        rows = np.arange(x_adv.shape[0])
        z_true = logits[rows, ys]
        masked = logits.copy()
        masked[rows, ys] = -np.inf
        j_star = np.argmax(masked, axis=1)
        margin = z_true - masked[rows, j_star]
        obj = -cfg.cw_c * np.maximum(margin, -CW_KAPPA)
        active = margin > -CW_KAPPA
        dlogits = np.zeros_like(logits)
        dlogits[rows[active], j_star[active]] = cfg.cw_c
        dlogits[rows[active], ys[active]] = -cfg.cw_c
    dx = input_gradient_from_dlogits(net, record, dlogits)
    return obj, dx, probs


def cw_loss(net: Network, x_adv, y: int, c: float = CW_C_DEFAULT) -> float:
    """Margin objective c * max(z_true - max_{j != true} z_j, -kappa) at
    kappa = 0; pgd with the cw loss kind maximizes its negation."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    cfg = AttackConfig(epsilon=0.0, loss_kind="cw", cw_c=c)
    obj, _, _ = _objective_and_dlogits(
        net, x_adv[None, :], np.array([y]), cfg, None
    )
    return float(-obj[0])


def pgd_batch(net: Network, xs, ys, cfg: AttackConfig,
              x_init: np.ndarray | None = None):
    """Iterative sign-gradient ascent with per-step ball projection and
    clipping.

    x_init overrides the starting point (already inside the ball; used by
    the KL-regularized trainer's Gaussian warm start); otherwise a uniform
    random start is drawn when cfg.random_start is set.

    Returns (x_adv [N, d], success [N] bool, trace [num_steps + 1] of the
    batch-mean objective).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = None if ys is None else np.asarray(ys)
    _check_xy(net, xs, ys)
    if cfg.loss_kind != "kl_from_clean" and ys is None:
        raise ContractError(f"loss_kind {cfg.loss_kind!r} needs labels")
    p_clean = forward_batch(net, xs) if cfg.loss_kind == "kl_from_clean" else None
    if x_init is not None:
        x_adv = _project(np.asarray(x_init, dtype=np.float64), xs, cfg)
    elif cfg.random_start:
        rng = make_rng(cfg.rng_seed)
        x_adv = _project(xs + rng.uniform(-cfg.epsilon, cfg.epsilon, size=xs.shape), xs, cfg)
    else:
        x_adv = xs.copy()
    trace = []
    for _ in range(cfg.num_steps):
        obj, dx, _ = _objective_and_dlogits(net, x_adv, ys, cfg, p_clean)
        trace.append(float(np.mean(obj)))
        x_adv = _project(x_adv + cfg.step_size * np.sign(dx), xs, cfg)
    obj, _, probs = _objective_and_dlogits(net, x_adv, ys, cfg, p_clean)
    trace.append(float(np.mean(obj)))
    pred = np.argmax(probs, axis=1)
    target = ys if ys is not None else np.argmax(p_clean, axis=1)
    return x_adv, pred != target, trace


def pgd(net: Network, x, y: int, cfg: AttackConfig) -> AttackResult:
    """Projected sign-gradient ascent from one clean input."""
    x = np.asarray(x, dtype=np.float64)
    x_adv, success, trace = pgd_batch(net, x[None, :], np.array([y]), cfg)
    return AttackResult(x_adv=x_adv[0], loss_trace=tuple(trace), success=bool(success[0]))


def fgsm_batch(net: Network, xs, ys, cfg: AttackConfig):
    """One signed gradient step of size epsilon; sign(0) stays put."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = None if ys is None else np.asarray(ys)
    _check_xy(net, xs, ys)
    p_clean = forward_batch(net, xs) if cfg.loss_kind == "kl_from_clean" else None
    if cfg.loss_kind != "kl_from_clean" and ys is None:
        raise ContractError(f"loss_kind {cfg.loss_kind!r} needs labels")
    obj0, dx, _ = _objective_and_dlogits(net, xs, ys, cfg, p_clean)
    x_adv = _project(xs + cfg.epsilon * np.sign(dx), xs, cfg)
    obj1, _, probs = _objective_and_dlogits(net, x_adv, ys, cfg, p_clean)
    pred = np.argmax(probs, axis=1)
    target = ys if ys is not None else np.argmax(p_clean, axis=1)
    trace = [float(np.mean(obj0)), float(np.mean(obj1))]
    return x_adv, pred != target, trace


def fgsm(net: Network, x, y: int, cfg: AttackConfig) -> AttackResult:
    """Fast gradient sign method for one input."""
    x = np.asarray(x, dtype=np.float64)
    x_adv, success, trace = fgsm_batch(net, x[None, :], np.array([y]), cfg)
    return AttackResult(x_adv=x_adv[0], loss_trace=tuple(trace), success=bool(success[0]))


def fisher_eig_attack(net: Network, x, cfg: AttackConfig) -> AttackResult:
    """Step along the dominant eigenvector of the Fisher information.

    The unit-L2 eigenvector is rescaled by its max-abs entry so the move
    spends the full L-infinity budget; the sign is chosen to maximize the
    KL divergence from the clean output.  A zero Fisher matrix (constant
    output) returns the input unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a 1-D input, got shape {x.shape}")
    fi = fisher_at(net, x, d_max=0)
    lam, v = fisher_spectral(fi, rng=substream(cfg.rng_seed, "attack"))
    if lam == 0.0:
        return AttackResult(x_adv=x.copy(), loss_trace=(0.0,), success=False)
    eta = cfg.epsilon * v / np.max(np.abs(v))
    div_plus = adversarial_divergence(net, x, eta)
    div_minus = adversarial_divergence(net, x, -eta)
    if div_minus > div_plus:
        eta = -eta
    x_adv = _project(x[None, :] + eta[None, :], x[None, :], cfg)[0]
    clean_pred = int(np.argmax(forward_batch(net, x[None, :])[0]))
    adv_pred = int(np.argmax(forward_batch(net, x_adv[None, :])[0]))
    div = adversarial_divergence(net, x, x_adv - x)
    return AttackResult(x_adv=x_adv, loss_trace=(div,), success=adv_pred != clean_pred)


def robust_accuracy(net: Network, xs, ys, cfg: AttackConfig,
                    attack: str = "pgd") -> float:
    """Fraction of the batch still classified correctly after the attack."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys)
    if attack == "pgd":
        x_adv, _, _ = pgd_batch(net, xs, ys, cfg)
    elif attack == "fgsm":
        x_adv, _, _ = fgsm_batch(net, xs, ys, cfg)
    elif attack == "fisher_eig":
        x_adv = np.stack([fisher_eig_attack(net, xs[i], cfg).x_adv
                          for i in range(xs.shape[0])])
    else:
        raise ContractError(f"unknown attack {attack!r}")
    pred = np.argmax(forward_batch(net, x_adv), axis=1)
    return float(np.mean(pred == ys))
