"""Probability-space measures: KL, JS, cross-entropy, the cross-label KL
average over a dataset, and the label-JS lower bound on pairwise output KL.

All divergences are in nats.  Probabilities are clamped to ``EPS_PROB`` before
any log; one-hot zeros in cross-entropy multiply out and need no clamp.

The cross-label average treats the pair sum as running over ordered pairs
(i, j) with different labels while the pair count is the unordered one, which
makes the statistic the mean *symmetrized* KL over unordered cross-label
pairs.  Columns derived from it are therefore named ``cckl_sym``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

EPS_PROB = 1e-12

LN2 = float(np.log(2.0))

#: numerical slack when counting violations of the pairwise lower bound
BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class PairSamplingPlan:
    """How many unordered cross-label pairs to average, and with what seed.

    ``max_pairs=None`` means all pairs.  When the population is not larger
    than ``max_pairs`` the subsample degenerates to the full sorted pair list,
    so results match the all-pairs path bit for bit.
    """

    max_pairs: int | None = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.max_pairs is not None and self.max_pairs < 1:
            raise ContractError("max_pairs must be >= 1 (or None for all pairs)")


def _clamped(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.maximum(p, EPS_PROB)


def kl(p, q) -> float:
    """KL(p || q) in nats, entries clamped to EPS_PROB before the logs."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"distributions differ in length: {p.shape} vs {q.shape}")
    pc, qc = _clamped(p), _clamped(q)
    return float(np.sum(pc * (np.log(pc) - np.log(qc))))


def js(p, q) -> float:
    """Jensen-Shannon divergence, symmetric, in [0, ln 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"distributions differ in length: {p.shape} vs {q.shape}")
    m = (p + q) / 2.0
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def cross_entropy(class_index: int, p) -> float:
    """-log p[c] for the true class c (equals KL(onehot || p) up to clamping)."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= class_index < p.shape[-1]:
        raise DimensionError(f"class index {class_index} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[class_index], EPS_PROB)))


def lin_lower_bound(y_i: int, y_j: int, p_i, p_j, num_classes: int | None = None) -> float:
    """Label-JS lower bound on KL(p_i || p_j) for samples with different labels.

    Returns ``2 JS(onehot_i || onehot_j) - CE_i - CE_j``; for one-hot labels of
    distinct classes the JS term is exactly ln 2.  The caller compares the
    value against ``kl(p_i, p_j)``.  The bound is exact late in training but
    can exceed the KL for near-uniform output pairs, so violation counts are
    a logged diagnostic rather than an algebraic identity.
    """
    if y_i == y_j:
        raise ContractError("labels must differ for a cross-label bound")
    return 2.0 * LN2 - cross_entropy(y_i, p_i) - cross_entropy(y_j, p_j)


def log_prob_rows(probs: np.ndarray) -> np.ndarray:
    """Row-wise clamped log probabilities."""
    return np.log(_clamped(probs))


def kl_rows(p_rows: np.ndarray, q_rows: np.ndarray) -> np.ndarray:
    """Row-wise KL(p_rows[i] || q_rows[i]) for matching [N, n] arrays."""
    pc, qc = _clamped(p_rows), _clamped(q_rows)
    return np.sum(pc * (np.log(pc) - np.log(qc)), axis=1)


def kl_cross_matrix(probs: np.ndarray) -> np.ndarray:
    """[N, N] matrix of KL(row_i || row_j) for one [N, n] batch of distributions."""
    pc = _clamped(probs)
    logp = np.log(pc)
    self_term = np.sum(pc * logp, axis=1)
    return self_term[:, None] - pc @ logp.T


def cross_label_pairs(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unordered index pairs (i < j) whose labels differ."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    ii, jj = np.triu_indices(n, k=1)
    keep = labels[ii] != labels[jj]
    return ii[keep], jj[keep]


def cckl_from_probs(probs: np.ndarray, labels: np.ndarray, plan: PairSamplingPlan) -> float:
    """Mean symmetrized KL over (a seeded subsample of) cross-label pairs.

    Pairs are enumerated in sorted (i, j) order and reduced left to right, so
    a fixed seed reproduces the value bit for bit.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise DegenerateInputError("cross-label average needs at least 2 distinct labels")
    ii, jj = cross_label_pairs(labels)
    total = ii.shape[0]
    if plan.max_pairs is not None and plan.max_pairs < total:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(plan.seed)))
        chosen = np.sort(rng.choice(total, size=plan.max_pairs, replace=False))
        ii, jj = ii[chosen], jj[chosen]
    forward = kl_rows(probs[ii], probs[jj])
    backward = kl_rows(probs[jj], probs[ii])
    sym = 0.5 * (forward + backward)
    return float(np.sum(sym) / sym.shape[0])


def cckl(net, xs: np.ndarray, ys: np.ndarray, plan: PairSamplingPlan | None = None) -> float:
    """Cross-label mean symmetrized KL of a network's outputs on a dataset."""
    from .network import forward_batch

    if plan is None:
        plan = PairSamplingPlan()
    return cckl_from_probs(forward_batch(net, xs), ys, plan)


def count_lin_bound_violations(probs: np.ndarray, labels: np.ndarray) -> int:
    """Ordered cross-label pairs whose output KL falls below the label-JS bound.

    Checked against every ordered pair, with BOUND_SLACK absorbing clamping
    round-off.  Zero is the expected value on trained checkpoints.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    logp = log_prob_rows(probs)
    ce = -logp[np.arange(labels.shape[0]), labels]
    klmat = kl_cross_matrix(probs)
    bound = (2.0 * LN2 - ce)[:, None] - ce[None, :]
    cross = labels[:, None] != labels[None, :]
    return int(np.count_nonzero((klmat + BOUND_SLACK < bound) & cross))
