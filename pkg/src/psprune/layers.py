"""Layer graph, reference architectures and the forward pass.

A :class:`Model` is an ordered list of :class:`LayerSpec` nodes; each node
names its inputs, so residual adds and dense concatenations are explicit
edges. Parameters live in ``model.params`` keyed ``"<layer>.<param>"``,
batchnorm running statistics in ``model.buffers``, and structure parameters
in ``model.structures`` keyed by conv layer name.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .psp import StructureSet, alpha_shape, check_granularity, effective_active, init_alpha, substitute
from .tensor import ConvGeometry, ShapeError

KINDS = ("input", "conv", "linear", "batchnorm", "relu", "avgpool", "maxpool",
         "residual_add", "concat", "select", "const")
EXEMPT_REASONS = ("input", "output", "transition", "shortcut")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ModelError(ValueError):
    pass


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list
    attrs: dict = field(default_factory=dict)
    psp_attached: bool = False
    psp_exempt_reason: str | None = None
    block: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown layer kind {self.kind!r}")
        if self.psp_exempt_reason is not None and self.psp_exempt_reason not in EXEMPT_REASONS:
            raise ModelError(f"unknown exempt reason {self.psp_exempt_reason!r}")

    def geometry(self) -> ConvGeometry:
        a = self.attrs
        return ConvGeometry(a["K"], a["C"], a["R"], a["S"], a.get("stride", 1), a.get("padding", 0))

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs), "attrs": self.attrs,
                "psp_attached": self.psp_attached, "psp_exempt_reason": self.psp_exempt_reason,
                "block": self.block}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["name"], d["kind"], list(d["inputs"]), dict(d.get("attrs", {})),
                   d.get("psp_attached", False), d.get("psp_exempt_reason"), d.get("block"))


@dataclass
class Model:
    layers: list
    params: dict
    buffers: dict
    input_shape: tuple
    num_classes: int
    structures: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    compacted: bool = False

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self._index = {l.name: l for l in self.layers}
        if len(self._index) != len(self.layers):
            raise ModelError("duplicate layer names")

    def layer(self, name: str) -> LayerSpec:
        return self._index[name]

    def reindex(self):
        self._index = {l.name: l for l in self.layers}

    @property
    def output(self) -> str:
        return self.layers[-1].name

    def consumers(self) -> dict:
        out = {l.name: [] for l in self.layers}
        for l in self.layers:
            for i in l.inputs:
                out[i].append(l.name)
        return out

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def conv_layers(self):
        return [l for l in self.layers if l.kind == "conv"]

    def psp_layers(self):
        return [l for l in self.layers if l.psp_attached]


# ------------------------------------------------------------ construction

class _Builder:
    def __init__(self, input_shape, seed):
        self.layers: list[LayerSpec] = []
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)
        self.shape = {}
        self.input_shape = tuple(input_shape)
        self.add(LayerSpec("input", "input", []), self.input_shape)

    def add(self, spec: LayerSpec, out_shape):
        self.layers.append(spec)
        self.shape[spec.name] = tuple(out_shape)
        return spec.name

    def conv(self, name, src, K, k, stride=1, padding=None, psp=False, exempt=None, block=None):
        C, H, W = self.shape[src]
        padding = k // 2 if padding is None else padding
        g = ConvGeometry(K, C, k, k, stride, padding)
        Ho, Wo = g.out_hw(H, W)
        std = np.sqrt(2.0 / (C * k * k))
        self.params[f"{name}.weight"] = self.rng.normal(0.0, std, size=g.weight_shape)
        attrs = {"K": K, "C": C, "R": k, "S": k, "stride": stride, "padding": padding}
        return self.add(LayerSpec(name, "conv", [src], attrs, psp, exempt, block), (K, Ho, Wo))

    def bn(self, name, src, block=None):
        C = self.shape[src][0]
        self.params[f"{name}.gamma"] = np.ones(C)
        self.params[f"{name}.beta"] = np.zeros(C)
        self.buffers[f"{name}.running_mean"] = np.zeros(C)
        self.buffers[f"{name}.running_var"] = np.ones(C)
        return self.add(LayerSpec(name, "batchnorm", [src], {"C": C}, block=block), self.shape[src])

    def relu(self, name, src, block=None):
        return self.add(LayerSpec(name, "relu", [src], block=block), self.shape[src])

    def avgpool(self, name, src, kernel=None):
        C, H, W = self.shape[src]
        if kernel is None:
            return self.add(LayerSpec(name, "avgpool", [src], {"kernel": None}), (C, 1, 1))
        return self.add(LayerSpec(name, "avgpool", [src], {"kernel": kernel, "stride": kernel}),
                        (C, (H - kernel) // kernel + 1, (W - kernel) // kernel + 1))

    def maxpool(self, name, src, kernel):
        C, H, W = self.shape[src]
        return self.add(LayerSpec(name, "maxpool", [src], {"kernel": kernel, "stride": kernel}),
                        (C, (H - kernel) // kernel + 1, (W - kernel) // kernel + 1))

    def linear(self, name, src, out):
        n_in = int(np.prod(self.shape[src]))
        bound = 1.0 / np.sqrt(n_in)
        self.params[f"{name}.weight"] = self.rng.uniform(-bound, bound, size=(out, n_in))
        self.params[f"{name}.bias"] = np.zeros(out)
        return self.add(LayerSpec(name, "linear", [src], {"in": n_in, "out": out}, psp_exempt_reason="output"),
                        (out,))

    def join(self, name, kind, srcs, block=None):
        shapes = [self.shape[s] for s in srcs]
        if kind == "residual_add":
            out = shapes[0]
        else:
            out = (sum(s[0] for s in shapes),) + shapes[0][1:]
        return self.add(LayerSpec(name, kind, list(srcs), block=block), out)

    def model(self, num_classes, arch) -> Model:
        return Model(self.layers, self.params, self.buffers, self.input_shape, num_classes, {}, arch)


def valid_resnet_depths(limit: int = 110):
    return [d for d in range(8, limit + 1) if (d - 2) % 6 == 0]


def build_resnet_small(depth: int, num_classes: int, input_shape=(3, 32, 32),
                       widths=(16, 32, 64), seed: int = 0) -> Model:
    """CIFAR-style ResNet with ``(depth - 2) / 6`` basic blocks per stage.

    Block 3x3 convs are PSP-eligible; the input conv, projection shortcuts
    and the output linear layer are exempt.
    """
    if depth < 8 or (depth - 2) % 6:
        raise ModelError(f"invalid ResNet depth {depth}; valid depths are 6n+2: "
                         f"{', '.join(map(str, valid_resnet_depths(56)))}, ...")
    n = (depth - 2) // 6
    b = _Builder(input_shape, seed)
    x = b.conv("conv_in", "input", widths[0], 3, exempt="input")
    x = b.bn("bn_in", x)
    x = b.relu("relu_in", x)
    for stage, width in enumerate(widths):
        for i in range(n):
            blk = f"s{stage + 1}b{i + 1}"
            stride = 2 if (stage > 0 and i == 0) else 1
            h = b.conv(f"{blk}.conv1", x, width, 3, stride, psp=True, block=blk)
            h = b.bn(f"{blk}.bn1", h, blk)
            h = b.relu(f"{blk}.relu1", h, blk)
            h = b.conv(f"{blk}.conv2", h, width, 3, 1, psp=True, block=blk)
            h = b.bn(f"{blk}.bn2", h, blk)
            short = x
            if stride != 1 or b.shape[x][0] != width:
                short = b.conv(f"{blk}.short", x, width, 1, stride, padding=0, exempt="shortcut")
                short = b.bn(f"{blk}.short_bn", short)
            x = b.join(f"{blk}.add", "residual_add", [h, short], blk)
            x = b.relu(f"{blk}.relu2", x)
    x = b.avgpool("pool", x)
    b.linear("fc", x, num_classes)
    return b.model(num_classes, {"name": "resnet", "depth": depth, "widths": list(widths)})


def build_densenet_small(depth: int, num_classes: int, growth_rate: int = 12, input_shape=(3, 32, 32),
                         seed: int = 0, init_channels: int = 16) -> Model:
    """DenseNet without bottleneck or compression: 3 blocks of ``(depth - 4) / 3`` layers.

    Each dense layer is BN-ReLU-Conv3x3 producing ``growth_rate`` maps that are
    concatenated onto its input. Dense-layer convs are PSP-eligible; the input
    conv, 1x1 transitions and the output linear layer are exempt.
    """
    if depth < 7 or (depth - 4) % 3:
        raise ModelError(f"invalid DenseNet depth {depth}; valid depths are 3n+4 "
                         f"(7, 10, 13, ..., 40, ...)")
    n = (depth - 4) // 3
    b = _Builder(input_shape, seed)
    x = b.conv("conv_in", "input", init_channels, 3, exempt="input")
    for blk_i in range(3):
        for i in range(n):
            blk = f"d{blk_i + 1}l{i + 1}"
            h = b.bn(f"{blk}.bn", x, blk)
            h = b.relu(f"{blk}.relu", h, blk)
            h = b.conv(f"{blk}.conv", h, growth_rate, 3, psp=True, block=blk)
            x = b.join(f"{blk}.cat", "concat", [x, h], blk)
        if blk_i < 2:
            t = f"t{blk_i + 1}"
            h = b.bn(f"{t}.bn", x)
            h = b.relu(f"{t}.relu", h)
            h = b.conv(f"{t}.conv", h, b.shape[x][0], 1, padding=0, exempt="transition")
            x = b.avgpool(f"{t}.pool", h, 2)
    x = b.bn("bn_out", x)
    x = b.relu("relu_out", x)
    x = b.avgpool("pool", x)
    b.linear("fc", x, num_classes)
    return b.model(num_classes, {"name": "densenet", "depth": depth, "growth_rate": growth_rate,
                                        "init_channels": init_channels})


def build_plain_cnn(num_classes: int, input_shape=(1, 28, 28), widths=(8, 16), seed: int = 0) -> Model:
    """Conv-BN-ReLU-MaxPool stack with a linear head; no residual topology."""
    b = _Builder(input_shape, seed)
    x = "input"
    for i, width in enumerate(widths):
        x = b.conv(f"conv{i + 1}", x, width, 3, psp=i > 0, exempt="input" if i == 0 else None)
        x = b.bn(f"bn{i + 1}", x)
        x = b.relu(f"relu{i + 1}", x)
        x = b.maxpool(f"pool{i + 1}", x, 2)
    b.linear("fc", x, num_classes)
    return b.model(num_classes, {"name": "plain", "widths": list(widths)})


def build_model(arch: dict, num_classes: int, input_shape, seed: int = 0) -> Model:
    name = arch.get("name")
    if name == "resnet":
        return build_resnet_small(arch["depth"], num_classes, input_shape, tuple(arch.get("widths", (16, 32, 64))), seed)
    if name == "densenet":
        return build_densenet_small(arch["depth"], num_classes, arch.get("growth_rate", 12), input_shape, seed,
                                    arch.get("init_channels", 16))
    if name == "plain":
        return build_plain_cnn(num_classes, input_shape, tuple(arch.get("widths", (8, 16))), seed)
    raise ModelError(f"unknown architecture {name!r}; expected resnet, densenet or plain")


def attach_psp(model: Model, granularity: str, epsilon: float = 0.1, seed: int = 0,
               regularizer: str = "weight_decay", grad_rule: str = "paper_sum",
               include=(), exclude=()) -> Model:
    """Create a :class:`StructureSet` for every PSP-eligible conv layer.

    ``include`` names exempt layers to attach anyway and ``exclude`` removes
    eligible ones. Alpha is drawn from a stream separate from weight init.
    """
    check_granularity(granularity)
    include, exclude = set(include), set(exclude)
    unknown = (include | exclude) - {l.name for l in model.layers}
    if unknown:
        raise ModelError(f"unknown layers in PSP include/exclude lists: {sorted(unknown)}")
    model.structures = {}
    for idx, layer in enumerate(model.layers):
        if layer.kind != "conv":
            if layer.name in include:
                raise ModelError(f"layer {layer.name!r} is not a convolution and cannot carry PSP")
            continue
        attached = (layer.psp_attached or layer.name in include) and layer.name not in exclude
        layer.psp_attached = attached
        if not attached:
            continue
        if granularity in ("layer", "layer_channel") and layer.block is None:
            raise ModelError(f"layer granularity needs a residual or dense block; {layer.name!r} is not in one")
        shape = layer.geometry().weight_shape
        model.structures[layer.name] = StructureSet(
            granularity, init_alpha(alpha_shape(granularity, shape), [seed, idx]), epsilon,
            regularizer, grad_rule, weight_shape=shape)
    return model


# ------------------------------------------------------------------ shapes

def infer_shapes(model: Model) -> dict:
    """Output shape (C, H, W) or (F,) of every layer for the model's input shape."""
    shapes = {}
    for l in model.layers:
        ins = [shapes[i] for i in l.inputs]
        a = l.attrs
        if l.kind == "input":
            out = model.input_shape
        elif l.kind == "conv":
            C, H, W = ins[0]
            g = l.geometry()
            if C != g.C:
                raise ShapeError(f"{l.name}: expects {g.C} input channels, producer gives {C}")
            if "columns" in a and len(a["columns"]) == 0:
                raise ShapeError(f"{l.name}: no columns left")
            out = (g.K,) + g.out_hw(H, W)
        elif l.kind == "linear":
            n = int(np.prod(ins[0]))
            if n != a["in"]:
                raise ShapeError(f"{l.name}: expects {a['in']} features, producer gives {n}")
            out = (a["out"],)
        elif l.kind == "batchnorm":
            if ins[0][0] != a["C"]:
                raise ShapeError(f"{l.name}: expects {a['C']} channels, producer gives {ins[0][0]}")
            out = ins[0]
        elif l.kind in ("relu",):
            out = ins[0]
        elif l.kind in ("avgpool", "maxpool"):
            C, H, W = ins[0]
            k = a.get("kernel")
            if k is None:
                out = (C, 1, 1)
            else:
                s = a.get("stride") or k
                out = (C, (H - k) // s + 1, (W - k) // s + 1)
        elif l.kind == "residual_add":
            if any(s != ins[0] for s in ins):
                raise ShapeError(f"{l.name}: residual inputs differ {ins}")
            out = ins[0]
        elif l.kind == "concat":
            if any(s[1:] != ins[0][1:] for s in ins):
                raise ShapeError(f"{l.name}: concat spatial extents differ {ins}")
            out = (sum(s[0] for s in ins),) + ins[0][1:]
        elif l.kind == "select":
            out = (len(a["index"]),) + ins[0][1:]
        elif l.kind == "const":
            out = (a["C"], a["H"], a["W"])
        shapes[l.name] = tuple(out)
    return shapes


# ----------------------------------------------------------------- forward

def _conv_weight(model, layer, tape, leaves, use_psp, zero_out):
    w_name = f"{layer.name}.weight"
    w = leaves[w_name]
    s = model.structures.get(layer.name) if use_psp else None
    if s is None:
        return w
    a_name = f"{layer.name}.alpha"
    if a_name not in leaves:
        leaves[a_name] = tape.leaf(s.alpha, a_name, requires_grad=s.trainable)
    if not effective_active(s).any():
        zero_out[layer.name] = True
    return substitute(w, leaves[a_name], s)


def forward_graph(model: Model, x, tape: ad.Tape | None = None, train: bool = False,
                  use_psp: bool = True, requires_grad: bool = False):
    """Run the model on a tape. Returns ``(logits_node, tape, leaves)``.

    ``leaves`` maps parameter names (and ``"<conv>.alpha"``) to their leaf nodes.
    With ``use_psp`` every conv owning a StructureSet uses ``q = w * nu``.
    """
    tape = tape or ad.Tape()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match model input (N, {model.input_shape})")
    leaves = {name: tape.leaf(v, name, requires_grad) for name, v in model.params.items()}
    vals: dict[str, ad.Node] = {}
    # channels known to be exactly zero (fully pruned producers); their BN stats stay frozen
    zero_ch: dict[str, np.ndarray | None] = {}
    zero_out: dict[str, bool] = {}
    for l in model.layers:
        a = l.attrs
        ins = [vals[i] for i in l.inputs]
        zin = [zero_ch.get(i) for i in l.inputs]
        z = None
        if l.kind == "input":
            out = tape.constant(x, "input")
        elif l.kind == "conv":
            g = l.geometry()
            if "columns" in a:
                out = ad.conv2d_gathered(ins[0], leaves[f"{l.name}.weight"], g, a["columns"])
            else:
                w = _conv_weight(model, l, tape, leaves, use_psp, zero_out)
                out = ad.conv2d(ins[0], w, g)
            if zero_out.get(l.name):
                z = np.ones(g.K, bool)
        elif l.kind == "linear":
            out = ad.linear(ins[0], leaves[f"{l.name}.weight"], leaves.get(f"{l.name}.bias"))
        elif l.kind == "batchnorm":
            out = ad.batchnorm(ins[0], leaves[f"{l.name}.gamma"], leaves[f"{l.name}.beta"],
                               model.buffers[f"{l.name}.running_mean"], model.buffers[f"{l.name}.running_var"],
                               train, BN_MOMENTUM, BN_EPS, frozen=zin[0])
        elif l.kind == "relu":
            out, z = ad.relu(ins[0]), zin[0]
        elif l.kind == "avgpool":
            out, z = ad.avgpool2d(ins[0], a.get("kernel"), a.get("stride")), zin[0]
        elif l.kind == "maxpool":
            out, z = ad.maxpool2d(ins[0], a["kernel"], a.get("stride")), zin[0]
        elif l.kind == "residual_add":
            out = ins[0]
            for other in ins[1:]:
                out = ad.add(out, other)
            if all(m is not None for m in zin):
                z = np.logical_and.reduce(zin)
        elif l.kind == "concat":
            out = ad.concat(ins)
            if any(m is not None for m in zin):
                z = np.concatenate([m if m is not None else np.zeros(n.shape[1], bool) for m, n in zip(zin, ins)])
        elif l.kind == "select":
            out = ad.select_channels(ins[0], a["index"])
            if zin[0] is not None:
                z = zin[0][np.asarray(a["index"], dtype=np.intp)]
        elif l.kind == "const":
            value = model.params.get(f"{l.name}.value")
            shape = (x.shape[0], a["C"], a["H"], a["W"])
            if value is None:
                out, z = tape.constant(np.zeros(shape)), np.ones(a["C"], bool)
            else:
                out = tape.constant(np.broadcast_to(value.reshape(1, -1, 1, 1), shape).copy())
        else:  # pragma: no cover
            raise ModelError(f"unhandled layer kind {l.kind}")
        vals[l.name] = out
        if z is not None:
            zero_ch[l.name] = z
    return vals[model.output], tape, leaves


def forward(model: Model, batch, train: bool = False, use_psp: bool = True) -> np.ndarray:
    """Logits (N x num_classes) for a batch; eval mode by default."""
    logits, _, _ = forward_graph(model, batch, train=train, use_psp=use_psp)
    return logits.value


def loss(logits, labels) -> float:
    """Mean softmax cross-entropy of numpy logits."""
    tape = ad.Tape()
    return float(ad.cross_entropy(tape.constant(logits), labels).value)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode: str = "eval",
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> np.ndarray:
    """Numpy batchnorm; in ``"train"`` mode the running arrays are updated in place."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    tape = ad.Tape()
    out = ad.batchnorm(tape.constant(x), tape.constant(gamma), tape.constant(beta),
                       running_mean, running_var, mode == "train", momentum, eps)
    return out.value
