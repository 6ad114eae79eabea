"""Dense f64 arrays, the elementary linear algebra on them, and seeded randomness.

Arrays are plain numpy ``float64`` ndarrays throughout the package; this module
adds the few operations whose exact behavior the rest of the code depends on
(checked matmul, power iteration with a fixed stopping rule and sign
convention, Frobenius norm) plus the single place where random streams are
created.

Randomness: every generator is a numpy ``Generator`` over PCG64.  A run has one
global seed; independent components draw from named substreams derived from
it, so e.g. changing the attack seed never perturbs data generation.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ContractError, DimensionError

# Tolerance below which a matrix is accepted as symmetric.
SYMMETRY_TOL = 1e-10

# Defaults for power iteration.
POWER_TOL = 1e-8
POWER_MAX_ITER = 1000


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator: identical seed, identical stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _stream_key(name: str) -> int:
    # Stable across runs and platforms (no reliance on salted hash()).
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")


def substream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Generator for the named substream of a global seed.

    ``index`` distinguishes repeated uses of one stream (e.g. the shuffle
    stream keyed by epoch).  Different names never collide for the same seed.
    """
    ss = np.random.SeedSequence([int(seed), _stream_key(name), int(index)])
    return np.random.Generator(np.random.PCG64(ss))


def substream_seed(seed: int, name: str, index: int = 0) -> int:
    """A derived 64-bit seed for components that take a seed rather than a generator."""
    ss = np.random.SeedSequence([int(seed), _stream_key(name), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def fro_norm(a: np.ndarray) -> float:
    """Frobenius norm sqrt(sum of squared entries)."""
    return float(np.sqrt(np.sum(np.square(np.asarray(a, dtype=np.float64)))))


def _sign_normalize(v: np.ndarray) -> np.ndarray:
    # First component of nontrivial magnitude is made positive.
    for x in v:
        if abs(x) > 1e-12:
            return -v if x < 0 else v
    return v


def sym_eig_top(
    a: np.ndarray,
    tol: float = POWER_TOL,
    max_iter: int = POWER_MAX_ITER,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric PSD matrix by power iteration.

    Starts from a seeded random vector, iterates until the relative change of
    the Rayleigh quotient drops below ``tol`` or ``max_iter`` is hit.  The
    returned vector is unit-norm with its first nontrivial component positive.
    A zero matrix short-circuits to ``(0.0, zeros)`` — the zero vector flags
    the degenerate case.  When the dominant eigenvalue is (near-)repeated, any
    unit vector of the dominant subspace may come back: assert the Rayleigh
    quotient, not the vector.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL:
        raise ContractError("matrix is not symmetric within 1e-10")
    d = a.shape[0]
    if not np.any(a):
        return 0.0, np.zeros(d)

    if rng is None:
        rng = make_rng(0)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    rayleigh = float(v @ (a @ v))
    for _ in range(max_iter):
        w = a @ v
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            # start vector fell in the null space; re-draw
            v = rng.standard_normal(d)
            v /= np.linalg.norm(v)
            rayleigh = float(v @ (a @ v))
            continue
        v = w / norm_w
        new_rayleigh = float(v @ (a @ v))
        if abs(new_rayleigh - rayleigh) <= tol * max(abs(new_rayleigh), 1e-30):
            rayleigh = new_rayleigh
            break
        rayleigh = new_rayleigh
    return rayleigh, _sign_normalize(v)


def power_iteration_operator(
    matvec,
    dim: int,
    tol: float = POWER_TOL,
    max_iter: int = POWER_MAX_ITER,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """Matrix-free power iteration; same stopping rule and sign convention as sym_eig_top.

    ``matvec`` must implement a symmetric PSD operator.  A zero operator (first
    products vanish for repeated random probes) returns ``(0.0, zeros)``.
    """
    if rng is None:
        rng = make_rng(0)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    w = matvec(v)
    redraws = 0
    while np.linalg.norm(w) == 0.0:
        redraws += 1
        if redraws > 3:
            return 0.0, np.zeros(dim)
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        w = matvec(v)
    rayleigh = float(v @ w)
    for _ in range(max_iter):
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            break
        v = w / norm_w
        w = matvec(v)
        new_rayleigh = float(v @ w)
        if abs(new_rayleigh - rayleigh) <= tol * max(abs(new_rayleigh), 1e-30):
            rayleigh = new_rayleigh
            break
        rayleigh = new_rayleigh
    return rayleigh, _sign_normalize(v)
