"""Feed-forward classifier with exact reverse-mode gradients.

The model is a stack of affine layers with an elementwise activation after
every layer except the last, followed by a softmax head.  Activations can be
disabled globally (``activation="none"``) or per layer through a boolean mask,
which realizes the pure-linear and half-linear model variants.

Gradients come in two flavors: parameter gradients for training, and the
n x d Jacobian of log output probabilities with respect to the input, which
is the raw material of the input-space Fisher information.  Both are computed
by explicit reverse passes over a recorded forward evaluation.

Conventions: batches are [N, d] with samples as rows; weight matrices are
[fan_in, fan_out]; ReLU's subgradient at 0 is 0; probabilities are clamped to
EPS_PROB and renormalized so the output sums to 1 at float precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .divergences import EPS_PROB
from .errors import ContractError, DimensionError, FormatError, StateError

ACTIVATIONS = ("none", "relu", "tanh")

CHECKPOINT_FORMAT_VERSION = 1


def _canon_activation(value) -> str:
    if value is None:
        return "none"
    name = str(value).lower()
    if name not in ACTIVATIONS:
        raise ContractError(f"unknown activation {value!r}, expected one of {ACTIVATIONS}")
    return name


@dataclass(frozen=True)
class Architecture:
    """Shape of the classifier.  layer_widths includes the output layer."""

    input_dim: int
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    activation_mask: tuple[bool, ...] | None = None
    num_classes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "activation", _canon_activation(self.activation))
        if self.activation_mask is not None:
            object.__setattr__(self, "activation_mask", tuple(bool(m) for m in self.activation_mask))
        if self.input_dim < 1:
            raise ContractError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.layer_widths:
            raise ContractError("layer_widths must be nonempty")
        if any(w < 1 for w in self.layer_widths):
            raise ContractError(f"all layer widths must be >= 1, got {self.layer_widths}")
        inferred = self.layer_widths[-1]
        if self.num_classes is None:
            object.__setattr__(self, "num_classes", inferred)
        elif self.num_classes != inferred:
            raise ContractError(
                f"num_classes {self.num_classes} does not match last width {inferred}"
            )
        n_slots = len(self.layer_widths) - 1
        if self.activation_mask is not None and len(self.activation_mask) != n_slots:
            raise ContractError(
                f"activation_mask has {len(self.activation_mask)} entries, expected {n_slots}"
            )

    def act_flags(self) -> tuple[str, ...]:
        """Effective activation per hidden slot after applying the mask."""
        n_slots = len(self.layer_widths) - 1
        if self.activation == "none":
            return ("none",) * n_slots
        mask = self.activation_mask if self.activation_mask is not None else (True,) * n_slots
        return tuple(self.activation if m else "none" for m in mask)


def half_linear_mask(n_slots: int) -> tuple[bool, ...]:
    """Mask keeping the first half of the hidden slots linear."""
    linear = n_slots // 2
    return tuple(i >= linear for i in range(n_slots))


@dataclass
class Network:
    """Architecture plus parameters.  version changes on every update so
    that gradient calls can detect stale forward records."""

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    version: int = 0

    def bump_version(self):
        self.version += 1

    def num_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


def init_network(arch: Architecture, rng: np.random.Generator) -> Network:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    weights = []
    biases = []
    fan_in = arch.input_dim
    for width in arch.layer_widths:
        std = 1.0 / np.sqrt(fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_in, width)))
        biases.append(np.zeros(width))
        fan_in = width
    return Network(arch=arch, weights=weights, biases=biases)


def _check_batch(arch: Architecture, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != arch.input_dim:
        raise DimensionError(
            f"expected batch of shape [N, {arch.input_dim}], got {xs.shape}"
        )
    if not np.all(np.isfinite(xs)):
        raise ContractError("input batch contains non-finite entries")
    return xs


def _apply_act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "none":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z: np.ndarray, kind: str) -> np.ndarray | None:
    if kind == "none":
        return None
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax, clamped to EPS_PROB and renormalized."""
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=-1, keepdims=True)
    p = np.maximum(p, EPS_PROB)
    return p / np.sum(p, axis=-1, keepdims=True)


@dataclass
class ForwardRecord:
    """Intermediate state of one batched forward pass, consumed by the
    reverse passes.  Tied to the network version it was computed with."""

    layer_inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    probs: np.ndarray
    act_flags: tuple[str, ...]
    version: int = field(default=0)


def forward_with_record(net: Network, xs) -> ForwardRecord:
    xs = _check_batch(net.arch, xs)
    flags = net.arch.act_flags()
    layer_inputs = [xs]
    preacts = []
    a = xs
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        preacts.append(z)
        if l < last:
            a = _apply_act(z, flags[l])
            layer_inputs.append(a)
    probs = softmax_rows(preacts[-1])
    return ForwardRecord(layer_inputs, preacts, probs, flags, net.version)


def logits_batch(net: Network, xs) -> np.ndarray:
    xs = _check_batch(net.arch, xs)
    flags = net.arch.act_flags()
    a = xs
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        a = _apply_act(z, flags[l]) if l < last else z
    return a


def forward_batch(net: Network, xs) -> np.ndarray:
    """[N, n] probability rows."""
    return softmax_rows(logits_batch(net, xs))


def forward(net: Network, x) -> np.ndarray:
    """Probability vector for a single input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a 1-D input, got shape {x.shape}")
    return forward_batch(net, x[None, :])[0]


def _check_record(net: Network, record: ForwardRecord):
    if record is None:
        raise StateError("no forward record; run forward_with_record first")
    if record.version != net.version:
        raise StateError(
            f"forward record is stale (record version {record.version}, "
            f"network version {net.version})"
        )


def _backward(net: Network, record: ForwardRecord, dz_last: np.ndarray,
              want_params: bool, want_input: bool):
    """Shared reverse pass from a logits cotangent.  Returns (dW, db, dx)."""
    flags = record.act_flags
    n_layers = len(net.weights)
    dws = [None] * n_layers if want_params else None
    dbs = [None] * n_layers if want_params else None
    dz = dz_last
    dx = None
    for l in range(n_layers - 1, -1, -1):
        if want_params:
            dws[l] = record.layer_inputs[l].T @ dz
            dbs[l] = np.sum(dz, axis=0)
        if l > 0:
            da = dz @ net.weights[l].T
            g = _act_grad(record.preacts[l - 1], flags[l - 1])
            dz = da if g is None else da * g
        elif want_input:
            dx = dz @ net.weights[0].T
    return dws, dbs, dx


def param_gradient_from_dlogits(net: Network, record: ForwardRecord, dlogits):
    """Exact parameter gradients given the loss cotangent at the logits."""
    _check_record(net, record)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != record.preacts[-1].shape:
        raise DimensionError(
            f"dlogits shape {dlogits.shape} does not match logits "
            f"{record.preacts[-1].shape}"
        )
    dws, dbs, _ = _backward(net, record, dlogits, want_params=True, want_input=False)
    return dws, dbs


def dprobs_to_dlogits(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Pull a cotangent on the softmax output back to the logits."""
    inner = np.sum(dprobs * probs, axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def param_gradient(net: Network, record: ForwardRecord, dprobs):
    """Parameter gradients given the loss gradient on the output distribution."""
    _check_record(net, record)
    dprobs = np.asarray(dprobs, dtype=np.float64)
    if dprobs.shape != record.probs.shape:
        raise DimensionError(
            f"dprobs shape {dprobs.shape} does not match outputs {record.probs.shape}"
        )
    return param_gradient_from_dlogits(net, record, dprobs_to_dlogits(record.probs, dprobs))


def input_gradient_from_dlogits(net: Network, record: ForwardRecord, dlogits) -> np.ndarray:
    """[N, d] gradient of the loss w.r.t. the inputs, from a logits cotangent."""
    _check_record(net, record)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != record.preacts[-1].shape:
        raise DimensionError(
            f"dlogits shape {dlogits.shape} does not match logits "
            f"{record.preacts[-1].shape}"
        )
    _, _, dx = _backward(net, record, dlogits, want_params=False, want_input=True)
    return dx


def logp_jacobian_and_probs(net: Network, xs) -> tuple[np.ndarray, np.ndarray]:
    """([N, n, d] Jacobian of log probabilities w.r.t. the input, [N, n] probs),
    both from a single recorded forward pass (one reverse pass per class).

    The cotangent for class j is e_j - p, the exact logits gradient of
    log p_j, with p the clamped renormalized output.  Weighting the rows by
    that same p makes sum_j p_j * row_j vanish at float precision.
    """
    record = forward_with_record(net, xs)
    p = record.probs
    n_batch, n_classes = p.shape
    jac = np.empty((n_batch, n_classes, net.arch.input_dim))
    for j in range(n_classes):
        dz = -p.copy()
        dz[:, j] += 1.0
        _, _, dx = _backward(net, record, dz, want_params=False, want_input=True)
        jac[:, j, :] = dx
    return jac, p


def input_jacobian_logp_batch(net: Network, xs) -> np.ndarray:
    """[N, n, d] Jacobian of log probabilities w.r.t. the input."""
    return logp_jacobian_and_probs(net, xs)[0]


def input_jacobian_logp(net: Network, x) -> np.ndarray:
    """[n, d] per-class gradients of log f_j at a single point."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a 1-D input, got shape {x.shape}")
    return input_jacobian_logp_batch(net, x[None, :])[0]


def arch_to_json(arch: Architecture) -> str:
    return json.dumps(
        {
            "input_dim": arch.input_dim,
            "layer_widths": list(arch.layer_widths),
            "activation": arch.activation,
            "activation_mask": None if arch.activation_mask is None
            else list(arch.activation_mask),
        },
        sort_keys=True,
    )


def arch_from_json(text: str) -> Architecture:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad architecture descriptor: {exc}") from exc
    try:
        mask = raw["activation_mask"]
        return Architecture(
            input_dim=int(raw["input_dim"]),
            layer_widths=tuple(raw["layer_widths"]),
            activation=raw["activation"],
            activation_mask=None if mask is None else tuple(mask),
        )
    except KeyError as exc:
        raise FormatError(f"architecture descriptor missing field {exc}") from exc


def save_checkpoint(net: Network, path):
    """Write arch + parameters to an npz file; round-trips bit-exactly."""
    payload = {
        "format_version": np.array(CHECKPOINT_FORMAT_VERSION, dtype=np.int64),
        "arch_json": np.array(arch_to_json(net.arch)),
        "n_layers": np.array(len(net.weights), dtype=np.int64),
    }
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        payload[f"w{i}"] = w
        payload[f"b{i}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> Network:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    with archive:
        if "format_version" not in archive:
            raise FormatError(f"{path} has no format_version tag")
        version = int(archive["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise FormatError(
                f"{path} has format version {version}, "
                f"expected {CHECKPOINT_FORMAT_VERSION}"
            )
        arch = arch_from_json(str(archive["arch_json"]))
        n_layers = int(archive["n_layers"])
        if n_layers != len(arch.layer_widths):
            raise FormatError(
                f"{path} stores {n_layers} layers but the descriptor "
                f"declares {len(arch.layer_widths)}"
            )
        weights = []
        biases = []
        fan_in = arch.input_dim
        for i, width in enumerate(arch.layer_widths):
            try:
                w = archive[f"w{i}"]
                b = archive[f"b{i}"]
            except KeyError as exc:
                raise FormatError(f"{path} is missing layer array {exc}") from exc
            if w.shape != (fan_in, width) or b.shape != (width,):
                raise FormatError(
                    f"{path} layer {i} has shapes {w.shape}/{b.shape}, "
                    f"expected {(fan_in, width)}/{(width,)}"
                )
            weights.append(np.asarray(w, dtype=np.float64))
            biases.append(np.asarray(b, dtype=np.float64))
            fan_in = width
    return Network(arch=arch, weights=weights, biases=biases)
