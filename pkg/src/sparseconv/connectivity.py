"""Channel-to-channel connection structures and architecture transforms.

A ConnectivityMask says which input channels feed each output channel of
a conv layer. The same mask applies at every spatial kernel position, so
sparsity lives purely in the channel graph and whole-plane convolutions
stay dense. Two compression transforms are provided: scaling channel
counts down by a multiplier, and keeping channel counts while sampling a
sparse random mask per layer interface.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError

DEPTH_MULTIPLIER = "depth_multiplier"
SPARSE_RANDOM = "sparse_random"
HYBRID = "hybrid"

PADDING_MODES = ("same", "valid")


class ConnectivityMask:
    """Boolean n_out x n_in connection matrix for one conv interface."""

    def __init__(self, n_in, n_out, active, seed=0):
        active = np.asarray(active, dtype=bool)
        if active.shape != (n_out, n_in):
            raise ShapeError(
                f"mask shape {active.shape} != ({n_out},{n_in})", axis="mask"
            )
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.active = active
        self.seed = int(seed)

    def density(self):
        return float(self.active.sum()) / (self.n_in * self.n_out)

    def count_active(self):
        return int(self.active.sum())

    def row_counts(self):
        return self.active.sum(axis=1)

    def col_counts(self):
        return self.active.sum(axis=0)

    def is_full(self):
        return bool(self.active.all())

    def same_pattern(self, other):
        return (
            self.n_in == other.n_in
            and self.n_out == other.n_out
            and np.array_equal(self.active, other.active)
        )

    def copy(self):
        return ConnectivityMask(self.n_in, self.n_out, self.active.copy(), self.seed)

    def to_json_dict(self):
        """Serializable form: active pairs sorted lexicographically so the
        same mask always produces byte-identical files."""
        pairs = sorted((int(o), int(i)) for o, i in np.argwhere(self.active))
        return {
            "n_in": self.n_in,
            "n_out": self.n_out,
            "seed": self.seed,
            "active": [list(p) for p in pairs],
        }

    @classmethod
    def from_json_dict(cls, d):
        active = np.zeros((d["n_out"], d["n_in"]), dtype=bool)
        for o, i in d["active"]:
            active[o, i] = True
        return cls(d["n_in"], d["n_out"], active, d.get("seed", 0))

    def __repr__(self):
        return (
            f"ConnectivityMask({self.n_out}x{self.n_in}, "
            f"active={self.count_active()}, density={self.density():.3f})"
        )


def mask_to_json(mask):
    return json.dumps(mask.to_json_dict(), sort_keys=True, separators=(",", ":"))


def mask_from_json(text):
    return ConnectivityMask.from_json_dict(json.loads(text))


def full_mask(n_in, n_out):
    if n_in < 1 or n_out < 1:
        raise ConfigError(f"mask dims must be >= 1, got ({n_in},{n_out})")
    return ConnectivityMask(n_in, n_out, np.ones((n_out, n_in), dtype=bool), seed=0)


def sparse_random_mask(n_in, n_out, alpha, seed, sampler="fixed_fan_in"):
    """Sample a sparse mask at connection fraction alpha.

    Default sampler gives every output row exactly
    f = max(1, ceil(alpha*n_in)) connections drawn uniformly without
    replacement. A repair pass then adds one connection from each
    all-false input column to a uniformly chosen output row, so no input
    channel is left dead; repairs only ever add entries, so the realized
    density may slightly exceed alpha. The 'bernoulli' sampler instead
    activates each edge independently with probability alpha and repairs
    both empty rows and empty columns.
    """
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0,1], got {alpha}")
    if n_in < 1 or n_out < 1:
        raise ConfigError(f"mask dims must be >= 1, got ({n_in},{n_out})")
    rng = np.random.default_rng(seed)
    active = np.zeros((n_out, n_in), dtype=bool)
    if sampler == "fixed_fan_in":
        f = max(1, math.ceil(alpha * n_in))
        for o in range(n_out):
            active[o, rng.choice(n_in, size=f, replace=False)] = True
    elif sampler == "bernoulli":
        active = rng.random((n_out, n_in)) < alpha
        for o in np.flatnonzero(~active.any(axis=1)):
            active[o, rng.integers(n_in)] = True
    else:
        raise ConfigError(f"unknown sampler {sampler!r}")
    for i in np.flatnonzero(~active.any(axis=0)):
        active[rng.integers(n_out), i] = True
    return ConnectivityMask(n_in, n_out, active, seed=seed)


def densify(mask, additional, rng):
    """Activate up to `additional` currently inactive entries, uniformly.

    Returns a new mask that is an entrywise superset of the input; at
    full density this is the identity. Pure given the rng state.
    """
    if additional < 0:
        raise ConfigError(f"additional must be >= 0, got {additional}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    inactive = np.argwhere(~mask.active)
    k = min(additional, len(inactive))
    out = mask.copy()
    if k > 0:
        picks = inactive[rng.choice(len(inactive), size=k, replace=False)]
        out.active[picks[:, 0], picks[:, 1]] = True
    return out


# ---------------------------------------------------------------------------
# Architecture description


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kh: int = 3
    kw: int = 3
    stride: int = 1
    padding: str = "same"
    batch_norm: bool = True
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class MaxPool:
    kind: str = field(default="maxpool", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class FC:
    out_features: int
    kind: str = field(default="fc", init=False)


@dataclass(frozen=True)
class SoftmaxXent:
    kind: str = field(default="softmax_xent", init=False)


@dataclass(frozen=True)
class ArchSpec:
    """Declarative sequential layer stack.

    Nonlinearities are implicit: every conv layer applies relu after its
    (optional) batch norm, and every fully connected layer applies relu
    except the final one feeding the loss.
    """

    input_shape: tuple  # (C, H, W)
    num_classes: int
    layers: tuple

    def validate(self):
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"bad input shape {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError(f"need >= 2 classes, got {self.num_classes}")
        if not self.layers or not isinstance(self.layers[-1], SoftmaxXent):
            raise ConfigError("last layer must be the softmax cross-entropy loss")
        if sum(isinstance(l, SoftmaxXent) for l in self.layers) != 1:
            raise ConfigError("exactly one loss layer allowed")
        fcs = [l for l in self.layers if isinstance(l, FC)]
        if not fcs or fcs[-1].out_features != self.num_classes:
            raise ConfigError("final FC layer must emit num_classes features")
        self.shapes()  # raises on any chain mismatch
        return self

    def shapes(self):
        """Per-layer output shapes; (C,H,W) tuples until flatten, ints after."""
        shape = tuple(self.input_shape)
        out = []
        flat = False
        for pos, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if flat:
                    raise ConfigError(f"conv at position {pos} after flatten")
                c, h, w = shape
                if layer.padding not in PADDING_MODES:
                    raise ConfigError(f"bad padding {layer.padding!r} at position {pos}")
                oh = -(-h // layer.stride) if layer.padding == "same" else (h - layer.kh) // layer.stride + 1
                ow = -(-w // layer.stride) if layer.padding == "same" else (w - layer.kw) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise ShapeError(f"conv at position {pos} shrinks input away", axis="spatial")
                shape = (layer.out_channels, oh, ow)
            elif isinstance(layer, MaxPool):
                if flat:
                    raise ConfigError(f"maxpool at position {pos} after flatten")
                c, h, w = shape
                shape = (c, -(-h // 2), -(-w // 2))
            elif isinstance(layer, Flatten):
                if flat:
                    raise ConfigError(f"duplicate flatten at position {pos}")
                c, h, w = shape
                shape = c * h * w
                flat = True
            elif isinstance(layer, FC):
                if not flat:
                    raise ConfigError(f"fc at position {pos} before flatten")
                shape = layer.out_features
            elif isinstance(layer, SoftmaxXent):
                if not flat:
                    raise ConfigError("loss layer before flatten")
                if shape != self.num_classes:
                    raise ConfigError(
                        f"loss expects {self.num_classes} logits, got {shape}"
                    )
            else:
                raise ConfigError(f"unknown layer {layer!r}")
            out.append(shape)
        return out

    def conv_layers(self):
        return [l for l in self.layers if isinstance(l, Conv)]

    def conv_interfaces(self):
        """(n_in, n_out) channel pair for each conv layer, in order."""
        pairs = []
        c = self.input_shape[0]
        for layer in self.layers:
            if isinstance(layer, Conv):
                pairs.append((c, layer.out_channels))
                c = layer.out_channels
        return pairs

    def conv_spatial_outputs(self):
        """(out_h, out_w) for each conv layer, in order."""
        outs = []
        for layer, shape in zip(self.layers, self.shapes()):
            if isinstance(layer, Conv):
                outs.append((shape[1], shape[2]))
        return outs

    def hidden_channel_counts(self):
        return [l.out_channels for l in self.conv_layers()]

    def to_json_dict(self):
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                layers.append({
                    "kind": "conv",
                    "out_channels": layer.out_channels,
                    "kernel": [layer.kh, layer.kw],
                    "stride": layer.stride,
                    "padding": layer.padding,
                    "batch_norm": layer.batch_norm,
                })
            elif isinstance(layer, FC):
                layers.append({"kind": "fc", "out_features": layer.out_features})
            else:
                layers.append({"kind": layer.kind})
        return {
            "schema_version": 1,
            "input": {
                "channels": self.input_shape[0],
                "height": self.input_shape[1],
                "width": self.input_shape[2],
            },
            "num_classes": self.num_classes,
            "layers": layers,
        }

    @classmethod
    def from_json_dict(cls, d):
        try:
            inp = d["input"]
            layers = []
            for pos, ld in enumerate(d["layers"]):
                kind = ld["kind"]
                if kind == "conv":
                    layers.append(Conv(
                        out_channels=int(ld["out_channels"]),
                        kh=int(ld["kernel"][0]),
                        kw=int(ld["kernel"][1]),
                        stride=int(ld.get("stride", 1)),
                        padding=ld.get("padding", "same"),
                        batch_norm=bool(ld.get("batch_norm", True)),
                    ))
                elif kind == "maxpool":
                    layers.append(MaxPool())
                elif kind == "flatten":
                    layers.append(Flatten())
                elif kind == "fc":
                    layers.append(FC(out_features=int(ld["out_features"])))
                elif kind == "softmax_xent":
                    layers.append(SoftmaxXent())
                else:
                    raise ConfigError(f"unknown layer kind {kind!r} at position {pos}")
            arch = cls(
                input_shape=(int(inp["channels"]), int(inp["height"]), int(inp["width"])),
                num_classes=int(d["num_classes"]),
                layers=tuple(layers),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"malformed architecture JSON: {exc!r}") from exc
        return arch.validate()


def arch_to_json(arch, indent=None):
    return json.dumps(arch.to_json_dict(), sort_keys=True, indent=indent)


def arch_from_json(text):
    return ArchSpec.from_json_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Compression transforms


@dataclass(frozen=True)
class TransformSpec:
    """Compression directive.

    alpha is the connection fraction for sparse_random and the filter
    fraction for depth_multiplier. The hybrid kind scales channels by
    depth_alpha first and then sparsifies at alpha.
    """

    kind: str
    alpha: float
    seed: int = 0
    depth_alpha: float = None

    def validate(self):
        if self.kind not in (DEPTH_MULTIPLIER, SPARSE_RANDOM, HYBRID):
            raise ConfigError(f"unknown transform kind {self.kind!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0,1], got {self.alpha}")
        if self.kind == HYBRID:
            if self.depth_alpha is None or not 0.0 < self.depth_alpha <= 1.0:
                raise ConfigError(f"hybrid needs depth_alpha in (0,1], got {self.depth_alpha}")
        return self

    def to_json_dict(self):
        d = {"kind": self.kind, "alpha": self.alpha, "seed": self.seed}
        if self.depth_alpha is not None:
            d["depth_alpha"] = self.depth_alpha
        return d

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            kind=d["kind"],
            alpha=float(d["alpha"]),
            seed=int(d.get("seed", 0)),
            depth_alpha=float(d["depth_alpha"]) if "depth_alpha" in d else None,
        ).validate()


def depth_multiplier_arch(arch, alpha):
    """Scale every conv layer's channel count to ceil(alpha * c).

    FC and pool layers are untouched, so each interior conv interface
    keeps roughly alpha^2 of its parameters.
    """
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0,1], got {alpha}")
    layers = tuple(
        replace(l, out_channels=math.ceil(alpha * l.out_channels))
        if isinstance(l, Conv) else l
        for l in arch.layers
    )
    return ArchSpec(arch.input_shape, arch.num_classes, layers).validate()


def sparsify_arch(arch, alpha, seed, sampler="fixed_fan_in"):
    """Build one sparse mask per conv interface at connection fraction alpha.

    Channel counts are unchanged. Interfaces where either side has just
    one channel use sqrt(alpha) instead, so single-filter bottlenecks
    (e.g. a grayscale input) are not starved relative to the rest of the
    network. Deterministic given (arch, alpha, seed).
    """
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0,1], got {alpha}")
    master = np.random.default_rng(seed)
    masks = []
    for n_in, n_out in arch.conv_interfaces():
        frac = math.sqrt(alpha) if min(n_in, n_out) == 1 else alpha
        mask_seed = int(master.integers(2**63))
        masks.append(sparse_random_mask(n_in, n_out, frac, mask_seed, sampler=sampler))
    return arch, masks


def apply_transform(arch, spec):
    """Realize a TransformSpec: returns (arch, masks or None for dense)."""
    spec.validate()
    if spec.kind == DEPTH_MULTIPLIER:
        return depth_multiplier_arch(arch, spec.alpha), None
    if spec.kind == SPARSE_RANDOM:
        return sparsify_arch(arch, spec.alpha, spec.seed)
    scaled = depth_multiplier_arch(arch, spec.depth_alpha)
    return sparsify_arch(scaled, spec.alpha, spec.seed)


# ---------------------------------------------------------------------------
# Cost accounting on specs (the built-network report lives in network.py)


def conv_layer_costs(arch, masks=None):
    """Per conv layer (weight_params, bias_params, bn_params, madds).

    A layer's weight count is kh*kw times its active connections; madds
    are weight multiplies repeated at every output position. masks=None
    means fully dense.
    """
    convs = arch.conv_layers()
    interfaces = arch.conv_interfaces()
    spatial = arch.conv_spatial_outputs()
    if masks is not None and len(masks) != len(convs):
        raise ConfigError(
            f"got {len(masks)} masks for {len(convs)} conv layers"
        )
    rows = []
    for idx, (layer, (n_in, n_out), (oh, ow)) in enumerate(zip(convs, interfaces, spatial)):
        active = n_in * n_out if masks is None else masks[idx].count_active()
        k2 = layer.kh * layer.kw
        weights = k2 * active
        bias = n_out
        bn = 2 * n_out if layer.batch_norm else 0
        madds = weights * oh * ow
        rows.append((weights, bias, bn, madds))
    return rows


def conv_param_count(arch, masks=None):
    """Total conv parameters (weights + biases + bn scales/shifts)."""
    return sum(w + b + g for w, b, g, _ in conv_layer_costs(arch, masks))


def match_budget(arch, target_params, kind, seed=0):
    """Find the transform whose realized conv parameter count best matches
    target_params.

    Searches the connection fraction t over all points where any layer's
    realized count can change; depth multiplier realizes t by scaling
    filters with sqrt(t) so both schemes keep about a t fraction of
    connections. Of equally close candidates the one not exceeding the
    budget wins.
    """
    if kind not in (DEPTH_MULTIPLIER, SPARSE_RANDOM):
        raise ConfigError(f"match_budget supports depth_multiplier/sparse_random, got {kind!r}")
    dense_count = conv_param_count(arch)
    if target_params > dense_count:
        raise ConfigError(
            f"target {target_params} exceeds dense conv param count {dense_count}"
        )

    interfaces = arch.conv_interfaces()
    channels = [c for _, c in interfaces] + [interfaces[0][0]]
    # Candidate fractions where some ceil() in the construction can step.
    cand = {1.0}
    for n in set(channels):
        for j in range(1, n + 1):
            frac = j / n
            cand.add(min(1.0, frac))
            cand.add(min(1.0, frac * frac))  # sqrt(alpha) interfaces step here
    candidates = sorted(cand)

    def realized(t):
        if kind == SPARSE_RANDOM:
            _, masks = sparsify_arch(arch, t, seed)
            return conv_param_count(arch, masks)
        return conv_param_count(depth_multiplier_arch(arch, math.sqrt(t)))

    counts = [(t, realized(t)) for t in candidates]
    min_count = min(c for _, c in counts)
    if target_params < min_count:
        raise ConfigError(
            f"target {target_params} below minimum viable conv param count {min_count}"
        )

    def rank(item):
        t, c = item
        over = c > target_params
        return (abs(c - target_params), over, -t)

    best_t, _ = min(counts, key=rank)
    if kind == SPARSE_RANDOM:
        return TransformSpec(SPARSE_RANDOM, alpha=best_t, seed=seed).validate()
    return TransformSpec(DEPTH_MULTIPLIER, alpha=math.sqrt(best_t), seed=seed).validate()


def validate_aliveness(arch, masks):
    """Report dead channels along the conv chain.

    Returns a list of (conv_index, 'in'|'out', channel) entries, one per
    channel with no incoming or no outgoing connections at that
    interface; an empty list means every channel has a path from the
    image to the prediction (FC layers are dense, so per-interface
    row/column coverage is sufficient in a sequential stack).
    """
    interfaces = arch.conv_interfaces()
    if len(masks) != len(interfaces):
        raise ConfigError(f"got {len(masks)} masks for {len(interfaces)} conv layers")
    dead = []
    for idx, (mask, (n_in, n_out)) in enumerate(zip(masks, interfaces)):
        if (mask.n_in, mask.n_out) != (n_in, n_out):
            raise ShapeError(
                f"mask {idx} is {mask.n_out}x{mask.n_in}, interface needs {n_out}x{n_in}",
                axis="channels",
            )
        for i in np.flatnonzero(mask.col_counts() == 0):
            dead.append((idx, "in", int(i)))
        for o in np.flatnonzero(mask.row_counts() == 0):
            dead.append((idx, "out", int(o)))
    return dead
