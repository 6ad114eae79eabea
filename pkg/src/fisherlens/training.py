"""Optimization loops: natural cross-entropy training, adversarial training
on PGD points, and KL-regularized robust training, plus the per-epoch
measurement pass that turns checkpoints into metric records.

The optimizer is classic momentum SGD with coupled weight decay,

    v <- mu * v + g + wd * theta,    theta <- theta - lr * v,

and a step learning-rate schedule: the rate after epoch e (1-based) is
lr0 * factor^(number of decay epochs <= e), so epoch e trains at the rate
in force after epoch e-1.

The robust regimes treat the inner maximizer as a constant of the outer
gradient: the KL-regularized objective backpropagates through both the
clean and the perturbed branch, but never through the attack itself.

All randomness derives from the run seed through named substreams (data,
init, shuffle, attack, probe), so reruns reproduce every checkpoint and
metric bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, fgsm_batch, pgd_batch, robust_accuracy
from .data import Dataset
from .divergences import (EPS_PROB, PairSamplingPlan, cckl_from_probs,
                          count_lin_bound_violations)
from .errors import ContractError, DegenerateInputError, DimensionError
from .fisher import PROBE_COUNT_DEFAULT, fisher_batch_stats
from .network import (Architecture, Network, forward_batch,
                      forward_with_record, init_network,
                      param_gradient_from_dlogits, save_checkpoint)
from .tensor_core import POWER_MAX_ITER, POWER_TOL, substream, substream_seed

REGIMES = ("natural", "pgd_at", "trades")

EPS_DEFAULT = 8.0 / 255.0
STEP_DEFAULT = 2.0 / 255.0

#: std of the Gaussian warm start for the KL inner maximizer, as a fraction
#: of epsilon (the KL objective has zero gradient exactly at the clean point)
TRADES_INIT_STD_FRAC = 1e-3


def default_inner_attack(regime: str, epsilon: float = EPS_DEFAULT,
                         clip_range: tuple[float, float] = (0.0, 1.0)) -> AttackConfig:
    """Inner-maximization defaults shared by both robust regimes."""
    loss = "kl_from_clean" if regime == "trades" else "cross_entropy"
    return AttackConfig(epsilon=epsilon, step_size=STEP_DEFAULT, num_steps=10,
                        loss_kind=loss, clip_range=clip_range, random_start=False)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and regime selection."""

    epochs: int
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_epochs: tuple[int, ...] = (30, 45)
    lr_decay_factor: float = 0.1
    regime: str = "natural"
    trades_inv_lambda: float = 5.0
    inner_attack: AttackConfig | None = None
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.regime not in REGIMES:
            raise ContractError(f"unknown regime {self.regime!r}, expected one of {REGIMES}")
        if self.trades_inv_lambda < 0:
            raise ContractError(f"trades_inv_lambda must be >= 0, got {self.trades_inv_lambda}")
        if self.checkpoint_every < 0:
            raise ContractError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        object.__setattr__(self, "lr_decay_epochs", tuple(self.lr_decay_epochs))


def lr_after_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate in force once epoch `epoch` (1-based) has finished."""
    hits = sum(1 for d in cfg.lr_decay_epochs if d <= epoch)
    return cfg.lr * cfg.lr_decay_factor ** hits


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate used while training epoch `epoch`."""
    return lr_after_epoch(cfg, epoch - 1)


@dataclass
class OptState:
    """Momentum buffers, one per parameter tensor."""

    vel_w: list[np.ndarray]
    vel_b: list[np.ndarray]

    @staticmethod
    def zeros(net: Network) -> "OptState":
        return OptState(vel_w=[np.zeros_like(w) for w in net.weights],
                        vel_b=[np.zeros_like(b) for b in net.biases])


def sgd_step(net: Network, grads, state: OptState, cfg: TrainConfig,
             lr: float | None = None):
    """One momentum-SGD update in place; returns (net, state)."""
    dws, dbs = grads
    if len(dws) != len(net.weights) or len(dbs) != len(net.biases):
        raise DimensionError("gradient structure does not match parameters")
    for g, w in zip(dws, net.weights):
        if g.shape != w.shape:
            raise DimensionError(f"weight gradient shape {g.shape} vs {w.shape}")
    for g, b in zip(dbs, net.biases):
        if g.shape != b.shape:
            raise DimensionError(f"bias gradient shape {g.shape} vs {b.shape}")
    step = cfg.lr if lr is None else lr
    for w, g, v in zip(net.weights, dws, state.vel_w):
        v *= cfg.momentum
        v += g + cfg.weight_decay * w
        w -= step * v
    for b, g, v in zip(net.biases, dbs, state.vel_b):
        v *= cfg.momentum
        v += g + cfg.weight_decay * b
        b -= step * v
    net.bump_version()
    return net, state


def _check_batch_nonempty(xs: np.ndarray):
    if xs.shape[0] == 0:
        raise DegenerateInputError("empty batch")


def _onehot(ys: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((ys.shape[0], n_classes))
    out[np.arange(ys.shape[0]), ys] = 1.0
    return out


def _ce_rows(probs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    rows = np.arange(ys.shape[0])
    return -np.log(np.maximum(probs[rows, ys], EPS_PROB))


def natural_loss_and_grads(net: Network, xs, ys):
    """(mean cross-entropy, parameter gradients) on a clean batch."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys)
    _check_batch_nonempty(xs)
    record = forward_with_record(net, xs)
    p = record.probs
    loss = float(np.mean(_ce_rows(p, ys)))
    dlogits = (p - _onehot(ys, p.shape[1])) / xs.shape[0]
    return loss, param_gradient_from_dlogits(net, record, dlogits)


def natural_loss(net: Network, xs, ys) -> float:
    """Mean cross-entropy of the clean batch."""
    xs = np.asarray(xs, dtype=np.float64)
    _check_batch_nonempty(xs)
    return float(np.mean(_ce_rows(forward_batch(net, xs), np.asarray(ys))))


def _pgdat_points(net: Network, xs, ys, inner: AttackConfig,
                  rng: np.random.Generator) -> np.ndarray:
    inner = replace(inner, loss_kind="cross_entropy")
    start = xs + rng.uniform(-inner.epsilon, inner.epsilon, size=xs.shape)
    x_adv, _, _ = pgd_batch(net, xs, ys, inner, x_init=start)
    return x_adv


def pgdat_loss_and_grads(net: Network, xs, ys, inner: AttackConfig,
                         rng: np.random.Generator):
    """Cross-entropy on PGD-perturbed points; gradients at those points."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys)
    _check_batch_nonempty(xs)
    x_adv = _pgdat_points(net, xs, ys, inner, rng)
    record = forward_with_record(net, x_adv)
    p = record.probs
    loss = float(np.mean(_ce_rows(p, ys)))
    dlogits = (p - _onehot(ys, p.shape[1])) / xs.shape[0]
    return loss, param_gradient_from_dlogits(net, record, dlogits)


def pgdat_loss(net: Network, xs, ys, inner: AttackConfig,
               rng: np.random.Generator | None = None) -> float:
    """Mean cross-entropy on the inner attack's points (random start on)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys)
    _check_batch_nonempty(xs)
    if rng is None:
        rng = substream(inner.rng_seed, "attack")
    x_adv = _pgdat_points(net, xs, ys, inner, rng)
    return float(np.mean(_ce_rows(forward_batch(net, x_adv), ys)))


def _trades_inner(net: Network, xs, inner: AttackConfig,
                  rng: np.random.Generator) -> np.ndarray:
    inner = replace(inner, loss_kind="kl_from_clean", random_start=False)
    start = xs + rng.normal(0.0, TRADES_INIT_STD_FRAC * inner.epsilon, size=xs.shape)
    x_adv, _, _ = pgd_batch(net, xs, None, inner, x_init=start)
    return x_adv


def trades_terms_given_adv(net: Network, xs, ys, x_adv):
    """(mean CE, mean KL(clean || adv)) with the perturbed points fixed."""
    record_nat = forward_with_record(net, xs)
    record_adv = forward_with_record(net, x_adv)
    p = record_nat.probs
    q = record_adv.probs
    ell = np.log(p) - np.log(q)
    kl_vec = np.sum(p * ell, axis=1)
    ce = float(np.mean(_ce_rows(p, np.asarray(ys))))
    return ce, float(np.mean(kl_vec)), (record_nat, record_adv, p, q, ell, kl_vec)


def trades_loss_given_adv(net: Network, xs, ys, inv_lambda: float, x_adv) -> float:
    """Objective value with a frozen inner point (used by gradient checks)."""
    ce, kl_mean, _ = trades_terms_given_adv(net, xs, np.asarray(ys), np.asarray(x_adv))
    return ce + inv_lambda * kl_mean


def trades_grads_given_adv(net: Network, xs, ys, inv_lambda: float, x_adv):
    """Loss and exact parameter gradients with the inner point frozen.

    The KL term backpropagates through both branches: the perturbed-side
    cotangent is (q - p) and the clean-side cotangent is p * (ell - KL)
    with ell = log p - log q, both scaled by inv_lambda / N.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    ce, kl_mean, extras = trades_terms_given_adv(net, xs, ys, x_adv)
    record_nat, record_adv, p, q, ell, kl_vec = extras
    n = xs.shape[0]
    loss = ce + inv_lambda * kl_mean
    dlog_nat = (p - _onehot(ys, p.shape[1])) / n
    dlog_nat += (inv_lambda / n) * (p * ell - p * kl_vec[:, None])
    dlog_adv = (inv_lambda / n) * (q - p)
    dws_n, dbs_n = param_gradient_from_dlogits(net, record_nat, dlog_nat)
    dws_a, dbs_a = param_gradient_from_dlogits(net, record_adv, dlog_adv)
    dws = [a + b for a, b in zip(dws_n, dws_a)]
    dbs = [a + b for a, b in zip(dbs_n, dbs_a)]
    return loss, (dws, dbs)


def trades_loss_and_grads(net: Network, xs, ys, inv_lambda: float,
                          inner: AttackConfig, rng: np.random.Generator):
    xs = np.asarray(xs, dtype=np.float64)
    _check_batch_nonempty(xs)
    x_adv = _trades_inner(net, xs, inner, rng)
    return trades_grads_given_adv(net, xs, ys, inv_lambda, x_adv)


def trades_loss(net: Network, xs, ys, inv_lambda: float, inner: AttackConfig,
                rng: np.random.Generator | None = None) -> float:
    """Cross-entropy plus inv_lambda times the clean-to-perturbed KL."""
    xs = np.asarray(xs, dtype=np.float64)
    _check_batch_nonempty(xs)
    if inv_lambda < 0:
        raise ContractError(f"inv_lambda must be >= 0, got {inv_lambda}")
    if rng is None:
        rng = substream(inner.rng_seed, "attack")
    x_adv = _trades_inner(net, xs, inner, rng)
    return trades_loss_given_adv(net, xs, ys, inv_lambda, x_adv)


@dataclass(frozen=True)
class EvalPlan:
    """What the per-epoch measurement pass computes and with what budgets."""

    pair_plan: PairSamplingPlan = field(default_factory=PairSamplingPlan)
    probe_count: int = PROBE_COUNT_DEFAULT
    pgd_attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        epsilon=EPS_DEFAULT, step_size=STEP_DEFAULT, num_steps=20,
        loss_kind="cross_entropy"))
    cw_attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        epsilon=EPS_DEFAULT, step_size=STEP_DEFAULT, num_steps=20,
        loss_kind="cw"))
    fgsm_attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        epsilon=EPS_DEFAULT, num_steps=1, loss_kind="cross_entropy",
        random_start=False))
    power_tol: float = POWER_TOL
    power_max_iter: int = POWER_MAX_ITER


@dataclass(frozen=True)
class MetricRecord:
    """One epoch's logged measurements.

    test_cckl_sym is the mean symmetrized KL over cross-label pairs;
    g1-style quantities elsewhere use the half-quadratic convention; the
    log10 column clamps its argument at 1e-12.
    """

    epoch: int
    train_loss: float
    test_acc: float
    test_cckl_sym: float
    avg_fisher_fro: float
    log10_avg_fisher_fro: float
    avg_lambda_max: float
    adv_acc_pgd: float
    adv_acc_cw: float
    lin_bound_violations: int
    test_ce_loss: float
    lr: float
    adv_acc_fgsm: float

    def __post_init__(self):
        for name in ("test_acc", "adv_acc_pgd", "adv_acc_cw", "adv_acc_fgsm"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must be in [0, 1], got {v}")
        if self.lin_bound_violations < 0:
            raise ContractError("lin_bound_violations must be >= 0")


def evaluate_epoch(net: Network, test_ds: Dataset, plan: EvalPlan, probe_xs,
                   *, epoch: int, train_loss: float, lr: float,
                   run_seed: int) -> MetricRecord:
    """Full measurement pass over the test set for one checkpoint."""
    probs = forward_batch(net, test_ds.xs)
    pred = np.argmax(probs, axis=1)
    acc = float(np.mean(pred == test_ds.ys))
    ce = float(np.mean(_ce_rows(probs, test_ds.ys)))
    cckl_value = cckl_from_probs(probs, test_ds.ys, plan.pair_plan)
    violations = count_lin_bound_violations(probs, test_ds.ys)
    fstats = fisher_batch_stats(net, probe_xs, plan.power_tol,
                                plan.power_max_iter,
                                rng=substream(run_seed, "probe", 1 + epoch))
    pgd_cfg = replace(plan.pgd_attack,
                      rng_seed=substream_seed(run_seed, "attack", 10_000 + epoch))
    cw_cfg = replace(plan.cw_attack,
                     rng_seed=substream_seed(run_seed, "attack", 20_000 + epoch))
    adv_pgd = robust_accuracy(net, test_ds.xs, test_ds.ys, pgd_cfg, "pgd")
    adv_cw = robust_accuracy(net, test_ds.xs, test_ds.ys, cw_cfg, "pgd")
    adv_fgsm = robust_accuracy(net, test_ds.xs, test_ds.ys, plan.fgsm_attack, "fgsm")
    return MetricRecord(
        epoch=epoch,
        train_loss=train_loss,
        test_acc=acc,
        test_cckl_sym=cckl_value,
        avg_fisher_fro=fstats.avg_fro,
        log10_avg_fisher_fro=float(np.log10(max(fstats.avg_fro, EPS_PROB))),
        avg_lambda_max=fstats.avg_lambda_max,
        adv_acc_pgd=adv_pgd,
        adv_acc_cw=adv_cw,
        lin_bound_violations=violations,
        test_ce_loss=ce,
        lr=lr,
        adv_acc_fgsm=adv_fgsm,
    )


@dataclass
class TrainResult:
    """Metric series plus the final network and any checkpoint paths.

    diverged marks a run aborted by the non-finite-loss guard; records then
    cover only the completed epochs.
    """

    records: list[MetricRecord]
    net: Network
    checkpoint_paths: list[str]
    diverged: bool = False
    diverged_epoch: int | None = None


def _batch_grads(net: Network, xs, ys, cfg: TrainConfig,
                 inner: AttackConfig, attack_rng: np.random.Generator):
    if cfg.regime == "natural":
        return natural_loss_and_grads(net, xs, ys)
    if cfg.regime == "pgd_at":
        return pgdat_loss_and_grads(net, xs, ys, inner, attack_rng)
    return trades_loss_and_grads(net, xs, ys, cfg.trades_inv_lambda, inner,
                                 attack_rng)


def run_training(train_ds: Dataset, test_ds: Dataset, arch: Architecture,
                 cfg: TrainConfig, plan: EvalPlan | None = None,
                 out_dir: str | None = None) -> TrainResult:
    """Train under the configured regime and measure every epoch.

    The probe set for Fisher averages is a fixed seeded subsample of the
    test set, drawn once.  Checkpoints are written when out_dir is given:
    every cfg.checkpoint_every epochs (0 means final only).
    """
    if plan is None:
        plan = EvalPlan()
    inner = cfg.inner_attack
    if inner is None and cfg.regime != "natural":
        inner = default_inner_attack(cfg.regime, clip_range=train_ds.feature_range)
    net = init_network(arch, substream(cfg.seed, "init"))
    shuffle_rng = substream(cfg.seed, "shuffle")
    attack_rng = substream(cfg.seed, "attack")
    probe_rng = substream(cfg.seed, "probe")
    n_probe = min(plan.probe_count, test_ds.n_samples)
    probe_idx = np.sort(probe_rng.choice(test_ds.n_samples, size=n_probe, replace=False))
    probe_xs = test_ds.xs[probe_idx]
    state = OptState.zeros(net)
    records: list[MetricRecord] = []
    checkpoint_paths: list[str] = []
    n_train = train_ds.n_samples
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_for_epoch(cfg, epoch)
        perm = shuffle_rng.permutation(n_train)
        loss_sum = 0.0
        for lo in range(0, n_train, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            loss, grads = _batch_grads(net, train_ds.xs[idx], train_ds.ys[idx],
                                       cfg, inner, attack_rng)
            if not np.isfinite(loss):
                return TrainResult(records=records, net=net,
                                   checkpoint_paths=checkpoint_paths,
                                   diverged=True, diverged_epoch=epoch)
            sgd_step(net, grads, state, cfg, lr)
            loss_sum += loss * idx.shape[0]
        train_loss = loss_sum / n_train
        records.append(evaluate_epoch(net, test_ds, plan, probe_xs,
                                      epoch=epoch, train_loss=train_loss,
                                      lr=lr, run_seed=cfg.seed))
        if out_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            path = os.path.join(out_dir, f"ckpt_epoch_{epoch:03d}.npz")
            save_checkpoint(net, path)
            checkpoint_paths.append(path)
    if out_dir:
        path = os.path.join(out_dir, "ckpt_final.npz")
        save_checkpoint(net, path)
        checkpoint_paths.append(path)
    return TrainResult(records=records, net=net, checkpoint_paths=checkpoint_paths)
