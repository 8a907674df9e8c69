"""Channel-permutation equivalence of sequential conv networks.

Permuting the hidden channels of every conv layer, while rewiring each
layer's input side to the previous layer's permutation and absorbing the
last permutation into the first fully connected layer, produces a
network with different weights but identical outputs on every input.
All per-channel ops in the layer vocabulary here (relu, batch norm,
pooling) commute with channel permutations, which is what makes this
work; any cross-channel nonlinearity would break it.
"""

import math
from dataclasses import dataclass

import numpy as np

from .connectivity import ConnectivityMask, ArchSpec
from .errors import ShapeError
from .layers import DenseConv, FCLayer, SparseConv


def check_permutation_set(net, perms):
    convs = net.conv_layers()
    if len(perms) != len(convs):
        raise ShapeError(
            f"need {len(convs)} permutations, got {len(perms)}", axis="layers"
        )
    for idx, (p, layer) in enumerate(zip(perms, convs)):
        p = np.asarray(p)
        if sorted(p.tolist()) != list(range(layer.c_out)):
            raise ShapeError(
                f"permutation {idx} is not a bijection on [0,{layer.c_out})",
                axis="channels",
            )


def random_permutation_set(net, rng):
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return [rng.permutation(layer.c_out) for layer in net.conv_layers()]


def inverse_permutations(perms):
    out = []
    for p in perms:
        inv = np.empty_like(np.asarray(p))
        inv[np.asarray(p)] = np.arange(len(p))
        out.append(inv)
    return out


def permute_network(net, perms):
    """Build the permuted twin of `net`.

    perms[l] maps new channel index -> old channel index for conv layer
    l's outputs; the input side of layer l is rewired with perms[l-1]
    (identity for the first layer, since image channels stay put). The
    first FC layer after flatten has its input rows permuted in
    channel-major blocks so the logits are untouched.
    """
    check_permutation_set(net, perms)
    twin = net.clone()
    prev = None  # identity over input channels
    conv_idx = 0
    fc_fixed = False
    for new_layer in twin._stack():
        if isinstance(new_layer, (DenseConv, SparseConv)):
            p = np.asarray(perms[conv_idx])
            _permute_conv(new_layer, p, prev)
            prev = p
            conv_idx += 1
        elif isinstance(new_layer, FCLayer) and not fc_fixed:
            if prev is not None:
                _permute_fc_input(new_layer, prev)
            fc_fixed = True
    return twin


def _permute_conv(layer, p, prev):
    if isinstance(layer, DenseConv):
        w = layer.weights[p]
        if prev is not None:
            w = w[:, prev]
        layer.weights = np.ascontiguousarray(w)
    else:
        inv_prev = None
        if prev is not None:
            inv_prev = np.empty_like(prev)
            inv_prev[prev] = np.arange(len(prev))
        dense_like = {}
        for o in range(layer.c_out):
            lo, hi = layer.row_ptr[o], layer.row_ptr[o + 1]
            dense_like[o] = (layer.cols[lo:hi].copy(), layer.values[lo:hi].copy())
        new_active = layer.mask.active[p]
        if prev is not None:
            new_active = new_active[:, prev]
        layer.mask = ConnectivityMask(layer.c_in, layer.c_out,
                                      np.ascontiguousarray(new_active),
                                      layer.mask.seed)
        layer._build_index()
        values = np.empty_like(layer.values)
        for new_o in range(layer.c_out):
            old_cols, old_vals = dense_like[int(p[new_o])]
            new_cols = inv_prev[old_cols] if inv_prev is not None else old_cols
            order = np.argsort(new_cols, kind="stable")
            lo, hi = layer.row_ptr[new_o], layer.row_ptr[new_o + 1]
            values[lo:hi] = old_vals[order]
        layer.values = values
    layer.bias = layer.bias[p].copy()
    if layer.batch_norm:
        layer.gamma = layer.gamma[p].copy()
        layer.beta = layer.beta[p].copy()
        layer.running_mean = layer.running_mean[p].copy()
        layer.running_var = layer.running_var[p].copy()


def _permute_fc_input(layer, p):
    c = len(p)
    if layer.d_in % c != 0:
        raise ShapeError(
            f"fc input dim {layer.d_in} not divisible by {c} channels", axis="features"
        )
    block = layer.d_in // c
    w = layer.weights.reshape(c, block, layer.d_out)[p].reshape(layer.d_in, layer.d_out)
    layer.weights = np.ascontiguousarray(w)


@dataclass(frozen=True)
class EquivalenceReport:
    trials: int
    tol: float
    max_abs_diff: float
    passed: bool

    def to_json_dict(self):
        return {
            "trials": self.trials,
            "tol": self.tol,
            "max_abs_diff": self.max_abs_diff,
            "pass": self.passed,
        }


def verify_equivalence(net_a, net_b, trials=5, tol=1e-5, seed=0, batch_size=8):
    """Compare logits of two networks on random input batches (eval mode)."""
    if net_a.arch.input_shape != net_b.arch.input_shape:
        raise ShapeError("networks disagree on input shape", axis="input")
    if net_a.arch.num_classes != net_b.arch.num_classes:
        raise ShapeError("networks disagree on class count", axis="classes")
    rng = np.random.default_rng(seed)
    c, h, w = net_a.arch.input_shape
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((batch_size, c, h, w))
        diff = np.abs(net_a.forward(x) - net_b.forward(x)).max()
        worst = max(worst, float(diff))
    return EquivalenceReport(trials, tol, worst, worst < tol)


def equivalence_class_size(arch):
    """Exact count of permutation-equivalent weight assignments.

    The product of factorials of the hidden conv channel counts. Accepts
    an ArchSpec or a plain sequence of channel counts.
    """
    if isinstance(arch, ArchSpec):
        sizes = arch.hidden_channel_counts()
    else:
        sizes = list(arch)
    out = 1
    for n in sizes:
        out *= math.factorial(n)
    return out
