"""Shared builders for the test suite.

Small deterministic networks and finite-difference helpers used across
several test modules.  Everything here is seeded; nothing reads global
random state.
"""

import numpy as np

from fisherlens.network import (
    Architecture,
    Network,
    forward,
    forward_batch,
    init_network,
)
from fisherlens.tensor_core import make_rng


def build_net(input_dim, layer_widths, activation="relu", activation_mask=None, seed=0):
    """Randomly initialized network with the given shape."""
    arch = Architecture(
        input_dim=input_dim,
        layer_widths=tuple(layer_widths),
        activation=activation,
        activation_mask=activation_mask,
    )
    return init_network(arch, make_rng(seed))


def manual_net(weights, biases, activation="none", activation_mask=None):
    """Network with explicit weights; shapes derive the architecture."""
    ws = [np.asarray(w, dtype=np.float64) for w in weights]
    bs = [np.asarray(b, dtype=np.float64) for b in biases]
    arch = Architecture(
        input_dim=ws[0].shape[0],
        layer_widths=tuple(w.shape[1] for w in ws),
        activation=activation,
        activation_mask=activation_mask,
    )
    return Network(arch=arch, weights=ws, biases=bs)


def logistic_net(w, b=0.0):
    """One input, two classes, logits [w*x + b, 0]."""
    return manual_net([np.array([[w, 0.0]])], [np.array([b, 0.0])])


def fgsm_example_net():
    """Logits [4.6*x - 2.3, 0]; at x = 0.5 the classes tie and the
    class-0 cross entropy gradient w.r.t. x is exactly -2.3."""
    return manual_net([np.array([[4.6, 0.0]])], [np.array([-2.3, 0.0])])


def random_simplex(rng, n):
    """Strictly positive probability vector of length n."""
    raw = rng.uniform(0.05, 1.0, size=n)
    return raw / raw.sum()


def ce_loss_at(net, x, y):
    probs = forward(net, x)
    return -np.log(max(probs[y], 1e-12))


def fd_input_gradient(net, x, y, h=1e-5):
    """Central differences of the cross entropy loss w.r.t. the input."""
    g = np.zeros_like(x)
    for i in range(x.shape[0]):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (ce_loss_at(net, xp, y) - ce_loss_at(net, xm, y)) / (2.0 * h)
    return g


def batch_ce_loss(net, xs, ys):
    probs = forward_batch(net, xs)
    picked = probs[np.arange(len(ys)), ys]
    return float(np.mean(-np.log(np.maximum(picked, 1e-12))))


def fd_param_gradients(net, xs, ys, h=1e-5, loss_fn=None):
    """Central differences of a batch loss w.r.t. every parameter.

    Returns (weight_grads, bias_grads) lists matching the network layout.
    Default loss is the mean cross entropy.
    """
    if loss_fn is None:
        loss_fn = lambda n: batch_ce_loss(n, xs, ys)
    wgrads = []
    bgrads = []
    for li in range(len(net.weights)):
        gw = np.zeros_like(net.weights[li])
        it = np.nditer(gw, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = net.weights[li][idx]
            net.weights[li][idx] = orig + h
            up = loss_fn(net)
            net.weights[li][idx] = orig - h
            down = loss_fn(net)
            net.weights[li][idx] = orig
            gw[idx] = (up - down) / (2.0 * h)
            it.iternext()
        wgrads.append(gw)
        gb = np.zeros_like(net.biases[li])
        for j in range(gb.shape[0]):
            orig = net.biases[li][j]
            net.biases[li][j] = orig + h
            up = loss_fn(net)
            net.biases[li][j] = orig - h
            down = loss_fn(net)
            net.biases[li][j] = orig
            gb[j] = (up - down) / (2.0 * h)
        bgrads.append(gb)
    return wgrads, bgrads


def rel_err(approx, exact, floor=1e-10):
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(float(np.linalg.norm(exact)), floor)
    return float(np.linalg.norm(approx - exact)) / denom
