"""Input-space Fisher information and everything built on it.

At a point x the Fisher information of the classifier's output distribution
with respect to input perturbations is

    F_x = sum_j f_j(x) * grad_x log f_j(x) * grad_x log f_j(x)^T,

a d x d symmetric PSD matrix assembled from the log-prob Jacobian.  Its
Frobenius norm and dominant eigenvalue track how violently the output moves
under small input changes: the KL divergence to a perturbed point is
0.5 * eta^T F_x eta plus higher-order terms.

This module provides the matrix (materialized up to D_MAX_DEFAULT, always
available matrix-free through the stored Jacobian), the norm and spectral
summaries, the exact quadratic/residual split of a cross-sample KL, numeric
directional Taylor coefficients, and the Cramer-Rao readout 1/lambda_max.

Quadratic forms and coefficients use the analytically exact 1/2 prefactor;
logged columns carry the g1_half_quad naming to record the convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core
from .divergences import kl
from .errors import ContractError, DimensionError, NumericError
from .network import Network, forward, logp_jacobian_and_probs
from .tensor_core import POWER_MAX_ITER, POWER_TOL, SYMMETRY_TOL, fro_norm, make_rng

#: largest input dimension for which F is materialized as a dense matrix
D_MAX_DEFAULT = 1024

#: default number of seeded probe points for per-epoch Fisher averages
PROBE_COUNT_DEFAULT = 256

#: Vandermonde condition limit for taylor_profile fits
VANDERMONDE_COND_LIMIT = 1e12


@dataclass
class FisherInfo:
    """Fisher information at one input point.

    Either or both of ``matrix`` (dense d x d) and ``jacobian`` (the n x d
    log-prob Jacobian with class weights ``probs``) are present; the matrix
    is dropped for d above the materialization cap, synthetic instances
    built from a raw matrix have no Jacobian.
    """

    x: np.ndarray
    matrix: np.ndarray | None = None
    jacobian: np.ndarray | None = None
    probs: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    @property
    def materialized(self) -> bool:
        return self.matrix is not None

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """F @ v, matrix-free through the Jacobian when it is stored."""
        if self.jacobian is not None:
            return self.jacobian.T @ (self.probs * (self.jacobian @ v))
        return self.matrix @ v


def _assemble(x: np.ndarray, jac: np.ndarray, probs: np.ndarray, d_max: int) -> FisherInfo:
    matrix = None
    if x.shape[0] <= d_max:
        m = np.sqrt(probs)[:, None] * jac
        matrix = m.T @ m
        matrix = 0.5 * (matrix + matrix.T)
    return FisherInfo(x=x, matrix=matrix, jacobian=jac, probs=probs)


def fisher_at(net: Network, x, d_max: int = D_MAX_DEFAULT) -> FisherInfo:
    """Exact Fisher information at x, from one Jacobian evaluation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a 1-D point, got shape {x.shape}")
    jac, probs = logp_jacobian_and_probs(net, x[None, :])
    return _assemble(x, jac[0], probs[0], d_max)


def fisher_from_matrix(x, f) -> FisherInfo:
    """Wrap an externally built symmetric matrix (synthetic/test inputs)."""
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != f.shape[1] or f.shape[0] != x.shape[0]:
        raise DimensionError(f"matrix shape {f.shape} does not fit point dim {x.shape}")
    if np.max(np.abs(f - f.T), initial=0.0) > SYMMETRY_TOL:
        raise ContractError("matrix is not symmetric within tolerance")
    return FisherInfo(x=x, matrix=f)


def fisher_fro_norm(fi: FisherInfo, allow_column_probes: bool = False) -> float:
    """Frobenius norm of F.

    Operator-only instances need d matvec probes to reconstruct columns,
    an O(d^2 n) cost that callers must opt into.
    """
    if fi.materialized:
        return fro_norm(fi.matrix)
    if not allow_column_probes:
        raise ContractError(
            "Frobenius norm of an unmaterialized Fisher operator takes "
            f"{fi.dim} column probes; pass allow_column_probes=True to accept"
        )
    total = 0.0
    e = np.zeros(fi.dim)
    for i in range(fi.dim):
        e[i] = 1.0
        col = fi.matvec(e)
        total += float(col @ col)
        e[i] = 0.0
    return float(np.sqrt(total))


def fisher_spectral(fi: FisherInfo, tol: float = POWER_TOL,
                    max_iter: int = POWER_MAX_ITER,
                    rng: np.random.Generator | None = None):
    """Dominant eigenpair (lambda_max, v) by seeded power iteration.

    Jacobian-backed instances iterate matrix-free (F v costs two thin
    matvecs); synthetic matrices delegate to the dense routine.  Zero
    operators report (0.0, zero vector).
    """
    if rng is None:
        rng = make_rng(0)
    if fi.jacobian is not None:
        return tensor_core.power_iteration_operator(fi.matvec, fi.dim, tol, max_iter, rng)
    return tensor_core.sym_eig_top(fi.matrix, tol, max_iter, rng)


def quadratic_form(fi: FisherInfo, eta) -> float:
    """eta^T F eta (no 1/2 factor; callers decide the convention)."""
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (fi.dim,):
        raise DimensionError(f"direction shape {eta.shape} does not match dim {fi.dim}")
    return float(eta @ fi.matvec(eta))


def adversarial_divergence(net: Network, x, eta) -> float:
    """KL(f(x) || f(x + eta)), the local adversarial objective."""
    x = np.asarray(x, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if x.shape != eta.shape:
        raise DimensionError(f"point shape {x.shape} vs direction shape {eta.shape}")
    return kl(forward(net, x), forward(net, x + eta))


@dataclass(frozen=True)
class Disentanglement:
    """Split of a cross-sample KL into its Fisher quadratic part and the
    exact higher-order residual: total_kl = g1 + g2 with g2 defined as the
    difference, so the identity is definitional rather than a truncation."""

    g1: float
    g2: float
    total_kl: float


def disentangle(net: Network, x_i, x_j) -> Disentanglement:
    """g1 = 0.5 d^T F_{x_i} d for d = x_j - x_i; g2 = KL - g1 exactly."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise DimensionError(f"point shapes differ: {x_i.shape} vs {x_j.shape}")
    d = x_j - x_i
    fi = fisher_at(net, x_i, d_max=0)
    g1 = 0.5 * quadratic_form(fi, d)
    total = kl(fi.probs, forward(net, x_j))
    return Disentanglement(g1=g1, g2=total - g1, total_kl=total)


@dataclass(frozen=True)
class TaylorProfile:
    """Directional Taylor coefficients of t -> KL(f(x) || f(x + t eta)).

    coefficients[k-2] estimates a_k in sum_{k=2..K} a_k t^k; the constant
    and linear terms are structurally zero because KL has a second-order
    zero at eta = 0.  fit_residual is the RMS misfit over t_grid.
    """

    eta: np.ndarray
    coefficients: np.ndarray
    fit_residual: float
    K: int


def taylor_profile(net: Network, x, eta, K: int, t_grid) -> TaylorProfile:
    """Least-squares fit of the directional KL growth to a polynomial in t."""
    if K < 2:
        raise ContractError(f"K must be >= 2, got {K}")
    x = np.asarray(x, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    ts = np.asarray(t_grid, dtype=np.float64).ravel()
    if np.unique(ts).size < K or np.any(ts <= 0) or not np.all(np.isfinite(ts)):
        raise ContractError(
            f"t_grid needs >= {K} distinct positive finite values, got {ts!r}"
        )
    g = np.array([adversarial_divergence(net, x, t * eta) for t in ts])
    vand = np.stack([ts ** k for k in range(2, K + 1)], axis=1)
    cond = float(np.linalg.cond(vand))
    if cond > VANDERMONDE_COND_LIMIT:
        raise NumericError(
            f"Vandermonde condition {cond:.3e} exceeds {VANDERMONDE_COND_LIMIT:.0e}; "
            "shrink K or widen the t_grid spread"
        )
    coeffs, _, _, _ = np.linalg.lstsq(vand, g, rcond=None)
    misfit = vand @ coeffs - g
    residual = float(np.sqrt(np.mean(misfit * misfit)))
    return TaylorProfile(eta=eta, coefficients=coeffs, fit_residual=residual, K=K)


def cramer_rao_ratio(fi: FisherInfo, tol: float = POWER_TOL,
                     max_iter: int = POWER_MAX_ITER,
                     rng: np.random.Generator | None = None) -> float:
    """1/lambda_max, the variance lower bound along the most informative
    direction; infinite for a zero matrix."""
    if not fi.materialized:
        raise ContractError("Cramer-Rao ratio needs a materialized matrix")
    lam, _ = fisher_spectral(fi, tol, max_iter, rng)
    if lam == 0.0:
        return float("inf")
    return 1.0 / lam


@dataclass(frozen=True)
class FisherBatchStats:
    """Averages of per-point Fisher summaries over a probe batch."""

    avg_fro: float
    avg_lambda_max: float
    mean_cr_ratio: float


def fisher_batch_stats(net: Network, xs, tol: float = POWER_TOL,
                       max_iter: int = POWER_MAX_ITER,
                       rng: np.random.Generator | None = None,
                       d_max: int = D_MAX_DEFAULT) -> FisherBatchStats:
    """One Jacobian sweep over a probe batch, reduced in index order."""
    if rng is None:
        rng = make_rng(0)
    xs = np.asarray(xs, dtype=np.float64)
    jac, probs = logp_jacobian_and_probs(net, xs)
    fro_sum = 0.0
    lam_sum = 0.0
    cr_sum = 0.0
    for i in range(xs.shape[0]):
        fi = _assemble(xs[i], jac[i], probs[i], d_max)
        fro_sum += fisher_fro_norm(fi, allow_column_probes=True)
        lam, _ = fisher_spectral(fi, tol, max_iter, rng)
        lam_sum += lam
        cr_sum += (1.0 / lam) if lam > 0.0 else float("inf")
    n = xs.shape[0]
    return FisherBatchStats(avg_fro=fro_sum / n, avg_lambda_max=lam_sum / n,
                            mean_cr_ratio=cr_sum / n)
