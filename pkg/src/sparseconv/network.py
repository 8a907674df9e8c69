"""Network assembly, forward/backward composition, cost model, checkpoints."""

import copy
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .connectivity import (
    ArchSpec, Conv, FC, Flatten, MaxPool, SoftmaxXent,
    ConnectivityMask, full_mask,
)
from .errors import CheckpointError, ConfigError, ShapeError
from .layers import DenseConv, FCLayer, FlattenLayer, MaxPoolLayer, SparseConv


def dtype_for(precision):
    if precision == 32:
        return np.float32
    if precision == 64:
        return np.float64
    raise ConfigError(f"precision must be 32 or 64, got {precision}")


class Network:
    """A built layer stack with parameters.

    `masks` aligns with the conv layers of the arch: a ConnectivityMask
    builds a sparse layer, None builds a dense one. The loss layer is
    not materialized; `forward` returns logits and `loss_backward`
    combines softmax cross-entropy with the backward sweep.
    """

    def __init__(self, arch, layers, masks, seed, precision):
        self.arch = arch
        self.layers = layers
        self.masks = masks
        self.seed = seed
        self.precision = precision
        self.dtype = dtype_for(precision)

    @classmethod
    def build(cls, arch, masks=None, seed=0, precision=32, sparse_dense_fallback=None):
        arch.validate()
        dtype = dtype_for(precision)
        rng = np.random.default_rng(seed)
        n_conv = len(arch.conv_layers())
        if masks is None:
            masks = [None] * n_conv
        if len(masks) != n_conv:
            raise ConfigError(f"got {len(masks)} masks for {n_conv} conv layers")
        for mask, (n_in, n_out) in zip(masks, arch.conv_interfaces()):
            if mask is not None and (mask.n_in, mask.n_out) != (n_in, n_out):
                raise ShapeError(
                    f"mask is {mask.n_out}x{mask.n_in}, conv interface needs {n_out}x{n_in}",
                    axis="channels",
                )
        layers = []
        conv_idx = 0
        c = arch.input_shape[0]
        last_fc_pos = max(i for i, l in enumerate(arch.layers) if isinstance(l, FC))
        shapes = arch.shapes()
        prev_shape = arch.input_shape
        for pos, (spec, shape) in enumerate(zip(arch.layers, shapes)):
            if isinstance(spec, Conv):
                mask = masks[conv_idx]
                if mask is None:
                    layer = DenseConv(c, spec.out_channels, spec.kh, spec.kw,
                                      spec.stride, spec.padding, spec.batch_norm,
                                      rng, dtype)
                else:
                    kwargs = {}
                    if sparse_dense_fallback is not None:
                        kwargs["dense_fallback"] = sparse_dense_fallback
                    layer = SparseConv(mask, spec.kh, spec.kw, spec.stride,
                                       spec.padding, spec.batch_norm, rng, dtype,
                                       **kwargs)
                layers.append(layer)
                conv_idx += 1
                c = spec.out_channels
            elif isinstance(spec, MaxPool):
                layers.append(MaxPoolLayer())
            elif isinstance(spec, Flatten):
                layers.append(FlattenLayer())
            elif isinstance(spec, FC):
                relu = pos != last_fc_pos
                layers.append(FCLayer(prev_shape, spec.out_features, relu, rng, dtype))
            elif isinstance(spec, SoftmaxXent):
                layers.append(None)  # loss handled functionally
            prev_shape = shape
        first = layers[0]
        if isinstance(first, (DenseConv, SparseConv)):
            first.skip_input_grad = True  # nothing upstream consumes image grads
        return cls(arch, layers, masks, seed, precision)

    # -- execution ---------------------------------------------------------

    def _stack(self):
        return [l for l in self.layers if l is not None]

    def forward(self, x, train=False):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        for layer in self._stack():
            x = layer.forward(x, train=train)
        return x

    def loss_backward(self, logits, labels):
        """Mean cross-entropy plus full backward sweep; grads land in layers."""
        loss, dlogits = ops.softmax_xent(logits, labels)
        g = dlogits
        for layer in reversed(self._stack()):
            g = layer.backward(g)
        return loss

    def predict(self, x):
        """Row-wise argmax of the logits; ties break to the first index."""
        return np.argmax(self.forward(x, train=False), axis=1)

    # -- structure ---------------------------------------------------------

    def conv_layers(self):
        return [l for l in self._stack() if isinstance(l, (DenseConv, SparseConv))]

    def sparse_layers(self):
        return [l for l in self._stack() if isinstance(l, SparseConv)]

    def density(self):
        """Active fraction of all conv channel connections."""
        dense = active = 0
        for layer in self.conv_layers():
            dense += layer.c_in * layer.c_out
            active += layer.active_connections()
        return active / dense if dense else 1.0

    def current_masks(self):
        """Masks as realized by the built layers (full for dense layers)."""
        out = []
        for layer in self.conv_layers():
            if isinstance(layer, SparseConv):
                out.append(layer.mask.copy())
            else:
                out.append(full_mask(layer.c_in, layer.c_out))
        return out

    def param_blocks(self):
        """(name, array) pairs for all trainables, in declaration order."""
        blocks = []
        for idx, layer in enumerate(self._stack()):
            for name, arr in layer.param_items():
                blocks.append((f"layer{idx}.{name}", arr))
        return blocks

    def state_blocks(self):
        blocks = []
        for idx, layer in enumerate(self._stack()):
            for name, arr in layer.state_items():
                blocks.append((f"layer{idx}.{name}", arr))
        return blocks

    def grad_blocks(self):
        blocks = []
        for idx, layer in enumerate(self._stack()):
            for name, _ in layer.param_items():
                blocks.append((f"layer{idx}.{name}", layer.grads[name]))
        return blocks

    def set_block(self, name, value):
        idx, pname = name.split(".", 1)
        layer = self._stack()[int(idx.removeprefix("layer"))]
        current = dict(layer.param_items() + layer.state_items())
        if pname not in current:
            raise CheckpointError(f"unknown parameter block {name!r}")
        if current[pname].shape != value.shape:
            raise CheckpointError(
                f"block {name!r} has shape {current[pname].shape}, file has {value.shape}"
            )
        layer.set_param(pname, value)

    def clone(self):
        return copy.deepcopy(self)

    def cast(self, precision):
        """Copy of this network with parameters cast to another precision."""
        out = self.clone()
        out.precision = precision
        out.dtype = dtype_for(precision)
        for layer in out._stack():
            layer.dtype = out.dtype
            for name, arr in layer.param_items() + layer.state_items():
                setattr(layer, name, arr.astype(out.dtype))
        return out


# ---------------------------------------------------------------------------
# Cost model


@dataclass(frozen=True)
class LayerCost:
    name: str
    weight_params: int
    bias_params: int
    bn_params: int
    madds: int
    is_classifier: bool = False

    @property
    def params(self):
        return self.weight_params + self.bias_params + self.bn_params


@dataclass(frozen=True)
class CostReport:
    """Parameter and multiply-add accounting for one built network.

    `params_total` excludes the final classifier FC (it is a plain linear
    map whose size only tracks the class count); its cost is reported
    separately. Multiply-adds are per single input image.
    """

    rows: tuple
    params_total: int
    classifier_params: int
    madds_total: int

    def to_json_dict(self):
        return {
            "rows": [
                {
                    "name": r.name,
                    "weight_params": r.weight_params,
                    "bias_params": r.bias_params,
                    "bn_params": r.bn_params,
                    "params": r.params,
                    "madds": r.madds,
                    "is_classifier": r.is_classifier,
                }
                for r in self.rows
            ],
            "params_total": self.params_total,
            "classifier_params": self.classifier_params,
            "madds_total": self.madds_total,
        }

    def table(self):
        header = f"{'layer':<14}{'weights':>10}{'bias':>7}{'bn':>6}{'params':>10}{'madds':>13}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            tag = " (classifier)" if r.is_classifier else ""
            lines.append(
                f"{r.name:<14}{r.weight_params:>10}{r.bias_params:>7}{r.bn_params:>6}"
                f"{r.params:>10}{r.madds:>13}{tag}"
            )
        lines.append("-" * len(header))
        lines.append(f"total params (excl. classifier): {self.params_total}")
        lines.append(f"classifier params:               {self.classifier_params}")
        lines.append(f"total madds:                     {self.madds_total}")
        return "\n".join(lines)


def cost_report(net):
    """Count parameters and per-image multiply-adds layer by layer.

    Conv weights are kh*kw per active connection; conv madds repeat the
    weight multiplies at every output position. FC layers count d_in*d_out
    weights and the same number of madds. Pool/flatten are free.
    """
    shapes = net.arch.shapes()
    rows = []
    conv_n = fc_n = 0
    stack_specs = [(spec, shape) for spec, shape in zip(net.arch.layers, shapes)
                   if not isinstance(spec, SoftmaxXent)]
    fc_total = sum(isinstance(s, FC) for s, _ in stack_specs)
    for layer, (spec, shape) in zip(net._stack(), stack_specs):
        if isinstance(spec, Conv):
            conv_n += 1
            k2 = spec.kh * spec.kw
            active = layer.active_connections()
            weights = k2 * active
            bn = 2 * spec.out_channels if spec.batch_norm else 0
            oh, ow = shape[1], shape[2]
            rows.append(LayerCost(
                name=f"conv{conv_n}",
                weight_params=weights,
                bias_params=spec.out_channels,
                bn_params=bn,
                madds=weights * oh * ow,
            ))
        elif isinstance(spec, FC):
            fc_n += 1
            rows.append(LayerCost(
                name=f"fc{fc_n}",
                weight_params=layer.d_in * layer.d_out,
                bias_params=layer.d_out,
                bn_params=0,
                madds=layer.d_in * layer.d_out,
                is_classifier=fc_n == fc_total,
            ))
    params_total = sum(r.params for r in rows if not r.is_classifier)
    classifier = sum(r.params for r in rows if r.is_classifier)
    madds_total = sum(r.madds for r in rows)
    return CostReport(tuple(rows), params_total, classifier, madds_total)


# ---------------------------------------------------------------------------
# Checkpoints

MAGIC = b"SPCVCKPT"
FORMAT_VERSION = 1


def save_checkpoint(net, path, extra=None):
    """Write a self-describing checkpoint.

    Layout: magic, little-endian u32 header length, UTF-8 JSON header
    (format version, arch, masks, seed, block directory), then the raw
    parameter and state blocks as little-endian float32 in declaration
    order.
    """
    blocks = net.param_blocks() + net.state_blocks()
    header = {
        "format_version": FORMAT_VERSION,
        "arch": net.arch.to_json_dict(),
        "masks": [m.to_json_dict() if m is not None else None for m in net.masks],
        "seed": net.seed,
        "precision": net.precision,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, precision=None):
    """Rebuild a Network from a checkpoint file.

    Raises CheckpointError on any structural problem (bad magic,
    truncation, undeclared blocks, shape drift).
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if start + hlen > len(raw):
        raise CheckpointError(f"{path} truncated inside header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        arch = ArchSpec.from_json_dict(header["arch"])
        masks = [
            ConnectivityMask.from_json_dict(m) if m is not None else None
            for m in header["masks"]
        ]
    except (ValueError, KeyError, ConfigError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {header.get('format_version')}, want {FORMAT_VERSION}"
        )
    net = Network.build(
        arch, masks=masks, seed=header.get("seed", 0),
        precision=precision or header.get("precision", 32),
    )
    offset = start + hlen
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(
                f"{path} truncated at byte {len(raw)} inside block {entry['name']!r}"
            )
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape)
        net.set_block(entry["name"], arr)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path} has {len(raw) - offset} trailing bytes")
    return net
