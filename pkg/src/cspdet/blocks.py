"""Architectural blocks, the model graph, shape inference and CIO accounting.

A :class:`ModelGraph` is an acyclic composition of named :class:`LayerSpec`
nodes executed in insertion order.  Parameters live in a flat store keyed by
``param_prefix`` derived names; two nodes sharing a prefix share weights,
which is how the unrolled recursive pyramid reuses its per-step modules.

The canonical detector topology: focus slicing -> stem CBL -> four
cross-stage-partial dense stages (each halving the spatial extent, SPP after
the last) -> recursive feature pyramid over the last three stages, with an
ASPP connecting module feeding each backbone stage on unroll steps t >= 2 ->
three detection heads at strides 8/16/32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

STRIDES = (8, 16, 32)


# ---------------------------------------------------------------------------
# closed-form block math
# ---------------------------------------------------------------------------


def cio(kind: str, c: int, m: int, d: int) -> int:
    """Convolutional input/output memory-traffic proxy of a dense block.

    dense:          c*m + (m^2 + m)*d/2
    partial_dense:  (c*m + (m^2 + m)*d) / 2

    Evaluated in exact rationals; a half-integral partial result rounds up
    (the conservative memory bound).  The dense form is always integral
    because m^2 + m is even.
    """
    if c < 1 or m < 1 or d < 0:
        raise ConfigError(f"cio requires c, m >= 1 and d >= 0, got ({c}, {m}, {d})")
    if kind == "dense":
        val = Fraction(c * m) + Fraction((m * m + m) * d, 2)
    elif kind == "partial_dense":
        val = Fraction(c * m + (m * m + m) * d, 2)
    else:
        raise ConfigError(f"unknown cio kind {kind!r}")
    return math.ceil(val)


@dataclass(frozen=True)
class SppParams:
    """Adaptive-bin pooling parameters for one spatial axis."""

    kernel: int
    stride: int
    padding: int
    padded_extent: int
    degenerate: bool    # bins outnumber input cells


def spp_params(h_in: int, n: int) -> SppParams:
    """Kernel/stride/padding of an n-bin adaptive pool over extent ``h_in``:
    K = S = ceil(h/n), P = floor((K*n - h + 1)/2), padded extent 2P + h."""
    if h_in < 1 or n < 1:
        raise ConfigError(f"spp_params requires h_in, n >= 1, got ({h_in}, {n})")
    k = -(-h_in // n)
    p = (k * n - h_in + 1) // 2
    return SppParams(kernel=k, stride=k, padding=p, padded_extent=2 * p + h_in,
                     degenerate=n > h_in)


def spp_pool_kernel(bin_count: int) -> int:
    """In-graph SPP kernel for an n-cell bin: 2n - 1 (odd, so stride-1
    pooling with padding n - 1 preserves the spatial extent)."""
    if bin_count < 1:
        raise ConfigError(f"spp bin count must be >= 1, got {bin_count}")
    return 2 * bin_count - 1


# ---------------------------------------------------------------------------
# pure block forwards
# ---------------------------------------------------------------------------

FOCUS_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))


def focus_slice(x: Tensor) -> Tensor:
    """Rearrange 2x2 spatial neighbourhoods into channels: NxCxHxW ->
    Nx4Cx(H/2)x(W/2), slices ordered (0,0), (1,0), (0,1), (1,1)."""
    _, _, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ConfigError(f"focus needs even spatial extents, got {h}x{w}")
    return T.concat([T.stride2_slice(x, r, c) for r, c in FOCUS_OFFSETS], axis=1)


def focus_unslice(y: np.ndarray) -> np.ndarray:
    """Inverse of :func:`focus_slice` on raw arrays (test oracle)."""
    n, c4, h, w = y.shape
    c = c4 // 4
    out = np.empty((n, c, h * 2, w * 2), dtype=y.dtype)
    for k, (r, cc) in enumerate(FOCUS_OFFSETS):
        out[:, :, r::2, cc::2] = y[:, k * c:(k + 1) * c]
    return out


def spp_concat(x: Tensor, bins: list[int]) -> Tensor:
    """Spatial pyramid pooling in tandem form: stride-1 same-size maxpools
    (kernel 2n-1, padding n-1 per bin) concatenated with the input."""
    if not bins:
        raise ConfigError("spp needs a non-empty bin list")
    h = x.data.shape[2]
    outs = [x]
    for n in bins:
        k = spp_pool_kernel(n)
        if k > h + 2 * (n - 1):
            raise ConfigError(f"spp bin {n}: kernel {k} exceeds padded extent "
                              f"{h + 2 * (n - 1)}")
        outs.append(T.maxpool2d(x, kernel=k, stride=1, padding=n - 1))
    return T.concat(outs, axis=1)


# ---------------------------------------------------------------------------
# parameterized units
# ---------------------------------------------------------------------------


@dataclass
class LayerSpec:
    """One graph node: operator kind, upstream node names and parameters."""

    name: str
    kind: str
    inputs: tuple[str, ...]
    args: dict = field(default_factory=dict)
    param_prefix: str = ""

    def __post_init__(self):
        if not self.param_prefix:
            self.param_prefix = self.name


def _he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    fan_in = c_in * k * k
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))


class ModelGraph:
    """Named layer nodes in topological order plus their parameter store."""

    def __init__(self, num_classes: int = 1, stride: int = 32):
        self.nodes: dict[str, LayerSpec] = {}
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.channels: dict[str, int] = {}
        self.input_name = "input"
        self.head_names: list[str] = []
        self.num_classes = num_classes
        self.stride = stride
        self.meta: dict = {}
        self.nodes["input"] = LayerSpec("input", "input", ())
        self.channels["input"] = 3
        self._rng: np.random.Generator | None = None

    # -- construction ------------------------------------------------------

    def add(self, name: str, kind: str, inputs, rng: np.random.Generator | None = None,
            param_prefix: str = "", **args) -> str:
        if name in self.nodes:
            raise ConfigError(f"duplicate node name {name!r}")
        inputs = (inputs,) if isinstance(inputs, str) else tuple(inputs)
        for i in inputs:
            if i not in self.nodes:
                raise ConfigError(f"node {name!r} references undefined input {i!r} "
                                  "(graph must be built in topological order)")
        spec = LayerSpec(name, kind, inputs, dict(args), param_prefix or name)
        try:
            handler = _KINDS[kind]
        except KeyError:
            raise ConfigError(f"unknown layer kind {kind!r}") from None
        in_ch = [self.channels[i] for i in inputs]
        self.channels[name] = handler.alloc(self, spec, in_ch, rng or self._rng)
        self.nodes[name] = spec
        return name

    def _param(self, key: str, init) -> Tensor:
        if key not in self.params:
            self.params[key] = T.parameter(init())
        return self.params[key]

    def _buffer(self, key: str, init) -> np.ndarray:
        if key not in self.buffers:
            self.buffers[key] = init()
        return self.buffers[key]

    def alloc_conv_unit(self, prefix: str, c_in: int, c_out: int, k: int,
                        rng: np.random.Generator, norm: bool, bias: bool,
                        bias_init: np.ndarray | None = None) -> None:
        self._param(f"{prefix}.w", lambda: _he_conv(rng, c_out, c_in, k))
        if bias:
            self._param(f"{prefix}.b",
                        lambda: np.zeros(c_out) if bias_init is None else bias_init.copy())
        if norm:
            self._param(f"{prefix}.gamma", lambda: np.ones(c_out))
            self._param(f"{prefix}.beta", lambda: np.zeros(c_out))
            self._buffer(f"{prefix}.rmean", lambda: np.zeros(c_out))
            self._buffer(f"{prefix}.rvar", lambda: np.ones(c_out))

    def conv_unit(self, prefix: str, x: Tensor, k: int, stride: int = 1,
                  padding: int | None = None, dilation: int = 1,
                  act: str = "leaky_relu", slope: float = 0.1, norm: bool = True,
                  bias: bool = False, train: bool = False) -> Tensor:
        if padding is None:
            padding = ((k - 1) * dilation) // 2
        out = T.conv2d(x, self.params[f"{prefix}.w"],
                       self.params.get(f"{prefix}.b") if bias else None,
                       stride=stride, padding=padding, dilation=dilation)
        if norm:
            out = T.batchnorm2d(out, self.params[f"{prefix}.gamma"],
                                self.params[f"{prefix}.beta"],
                                self.buffers[f"{prefix}.rmean"],
                                self.buffers[f"{prefix}.rvar"], training=train)
        return T.activation(out, act, slope)

    # -- execution ---------------------------------------------------------

    def forward(self, x: Tensor, train: bool = False) -> dict[str, Tensor]:
        """Run every node; returns all intermediate outputs by name."""
        outs: dict[str, Tensor] = {self.input_name: x}
        for spec in self.nodes.values():
            if spec.kind == "input":
                continue
            ins = [outs[i] for i in spec.inputs]
            try:
                outs[spec.name] = _KINDS[spec.kind].forward(self, spec, ins, train)
            except (ConfigError, DimensionError) as e:
                raise type(e)(f"node {spec.name!r}: {e}") from None
        return outs

    def forward_heads(self, x: Tensor, train: bool = False) -> list[Tensor]:
        outs = self.forward(x, train)
        return [outs[h] for h in self.head_names]

    def infer_shapes(self, h: int, w: int) -> dict[str, tuple[int, int, int]]:
        """Annotate every node with its (channels, height, width) output."""
        if h % self.stride or w % self.stride:
            raise ConfigError(f"input {h}x{w} must be divisible by {self.stride}")
        shapes: dict[str, tuple[int, int, int]] = {self.input_name: (3, h, w)}
        for spec in self.nodes.values():
            if spec.kind == "input":
                continue
            ins = [shapes[i] for i in spec.inputs]
            try:
                shapes[spec.name] = _KINDS[spec.kind].shape(self, spec, ins)
            except (ConfigError, DimensionError) as e:
                raise type(e)(f"node {spec.name!r}: {e}") from None
        return shapes

    def head_strides(self, size: int = 416) -> list[int]:
        shapes = self.infer_shapes(size, size)
        return [size // shapes[name][1] for name in self.head_names]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def edges(self) -> list[tuple[str, str]]:
        return [(src, spec.name) for spec in self.nodes.values() for src in spec.inputs]

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Trainable parameters and running buffers, for checkpointing."""
        out = {k: p.data for k, p in self.params.items()}
        out.update(self.buffers)
        return out


# ---------------------------------------------------------------------------
# kind handlers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Kind:
    alloc: callable    # (graph, spec, in_channels, rng) -> out_channels
    forward: callable  # (graph, spec, input_tensors, train) -> Tensor
    shape: callable    # (graph, spec, input_shapes) -> (c, h, w)


def _focus_alloc(g, spec, in_ch, rng):
    return 4 * in_ch[0]


def _focus_shape(g, spec, ins):
    c, h, w = ins[0]
    if h % 2 or w % 2:
        raise ConfigError(f"focus needs even spatial extents, got {h}x{w}")
    return 4 * c, h // 2, w // 2


def _cbl_alloc(g, spec, in_ch, rng):
    a = spec.args
    a.setdefault("k", 3)
    a.setdefault("s", 1)
    a.setdefault("p", None)
    a.setdefault("dilation", 1)
    a.setdefault("act", "leaky_relu")
    a.setdefault("slope", 0.1)
    a.setdefault("norm", True)
    a.setdefault("bias", not a["norm"])
    g.alloc_conv_unit(spec.param_prefix, in_ch[0], a["out"], a["k"], rng,
                      norm=a["norm"], bias=a["bias"])
    return a["out"]


def _cbl_forward(g, spec, ins, train):
    a = spec.args
    return g.conv_unit(spec.param_prefix, ins[0], a["k"], a["s"], a["p"],
                       a["dilation"], a["act"], a["slope"], a["norm"], a["bias"],
                       train)


def _cbl_shape(g, spec, ins):
    a = spec.args
    c, h, w = ins[0]
    p = a["p"] if a["p"] is not None else ((a["k"] - 1) * a["dilation"]) // 2
    oh = T.conv_out_extent(h, a["k"], a["s"], p, a["dilation"])
    ow = T.conv_out_extent(w, a["k"], a["s"], p, a["dilation"])
    if oh < 1 or ow < 1:
        raise ConfigError(f"output extent {oh}x{ow} < 1")
    return a["out"], oh, ow


def _csp_alloc(g, spec, in_ch, rng):
    a = spec.args
    c = in_ch[0]
    if c % 2:
        raise ConfigError(f"csp_dense needs an even channel count, got {c}")
    m, d = a["m"], a["d"]
    if m < 1 or d < 1:
        raise ConfigError(f"csp_dense needs m >= 1 and d >= 1, got ({m}, {d})")
    a.setdefault("out", c)
    a.setdefault("act", "leaky_relu")
    a.setdefault("slope", 0.1)
    a.setdefault("trans_act", a["act"])
    a.setdefault("trans_norm", True)
    half = c // 2
    p = spec.param_prefix
    for i in range(1, m + 1):
        g.alloc_conv_unit(f"{p}.dense{i}", half + (i - 1) * d, d, 3, rng,
                          norm=True, bias=False)
    g.alloc_conv_unit(f"{p}.trans_t", half + m * d, half, 1, rng,
                      norm=a["trans_norm"], bias=not a["trans_norm"])
    g.alloc_conv_unit(f"{p}.trans_u", half + half, a["out"], 1, rng,
                      norm=a["trans_norm"], bias=not a["trans_norm"])
    a["_in"] = c
    return a["out"]


def _csp_forward(g, spec, ins, train):
    a = spec.args
    x = ins[0]
    c = x.data.shape[1]
    if c % 2:
        raise ConfigError(f"csp_dense needs an even channel count, got {c}")
    half = c // 2
    p = spec.param_prefix
    skip = T.channel_slice(x, 0, half)          # x0': bypasses the dense path
    feats = [T.channel_slice(x, half, c)]       # x0'': feeds the dense layers
    for i in range(1, a["m"] + 1):
        y = g.conv_unit(f"{p}.dense{i}", T.concat(feats, axis=1) if i > 1 else feats[0],
                        k=3, act=a["act"], slope=a["slope"], train=train)
        feats.append(y)
    xt = g.conv_unit(f"{p}.trans_t", T.concat(feats, axis=1), k=1,
                     act=a["trans_act"], slope=a["slope"], norm=a["trans_norm"],
                     bias=not a["trans_norm"], train=train)
    return g.conv_unit(f"{p}.trans_u", T.concat([skip, xt], axis=1), k=1,
                       act=a["trans_act"], slope=a["slope"], norm=a["trans_norm"],
                       bias=not a["trans_norm"], train=train)


def _csp_shape(g, spec, ins):
    c, h, w = ins[0]
    if c % 2:
        raise ConfigError(f"csp_dense needs an even channel count, got {c}")
    return spec.args["out"], h, w


def _spp_alloc(g, spec, in_ch, rng):
    bins = spec.args["bins"]
    if not bins:
        raise ConfigError("spp needs a non-empty bin list")
    return in_ch[0] * (1 + len(bins))


def _spp_forward(g, spec, ins, train):
    return spp_concat(ins[0], spec.args["bins"])


def _spp_shape(g, spec, ins):
    c, h, w = ins[0]
    for n in spec.args["bins"]:
        if spp_pool_kernel(n) > h + 2 * (n - 1):
            raise ConfigError(f"spp bin {n} kernel exceeds padded extent")
    return c * (1 + len(spec.args["bins"])), h, w


_ASPP_BRANCHES = ((1, 1, 0), (3, 3, 3), (3, 6, 6))  # kernel, atrous rate, padding


def _aspp_alloc(g, spec, in_ch, rng):
    c = in_ch[0]
    if c % 4:
        raise ConfigError(f"aspp input channels must be divisible by 4, got {c}")
    q = c // 4
    p = spec.param_prefix
    for i, (k, _, _) in enumerate(_ASPP_BRANCHES, 1):
        g.alloc_conv_unit(f"{p}.branch{i}", c, q, k, rng, norm=False, bias=True)
    g.alloc_conv_unit(f"{p}.pool", c, q, 1, rng, norm=False, bias=True)
    return c


def _aspp_forward(g, spec, ins, train):
    x = ins[0]
    c = x.data.shape[1]
    if c % 4:
        raise ConfigError(f"aspp input channels must be divisible by 4, got {c}")
    _, _, h, w = x.data.shape
    p = spec.param_prefix
    outs = [g.conv_unit(f"{p}.branch{i}", x, k, padding=pad, dilation=rate,
                        act="relu", norm=False, bias=True, train=train)
            for i, (k, rate, pad) in enumerate(_ASPP_BRANCHES, 1)]
    pooled = g.conv_unit(f"{p}.pool", T.global_avgpool(x), k=1, act="relu",
                         norm=False, bias=True, train=train)
    outs.append(T.resize_nearest(pooled, h, w))
    return T.concat(outs, axis=1)


def _aspp_shape(g, spec, ins):
    c, h, w = ins[0]
    if c % 4:
        raise ConfigError(f"aspp input channels must be divisible by 4, got {c}")
    return c, h, w


def _upsample_alloc(g, spec, in_ch, rng):
    spec.args.setdefault("factor", 2)
    return in_ch[0]


def _upsample_forward(g, spec, ins, train):
    f = spec.args["factor"]
    _, _, h, w = ins[0].data.shape
    return T.resize_nearest(ins[0], h * f, w * f)


def _upsample_shape(g, spec, ins):
    c, h, w = ins[0]
    f = spec.args["factor"]
    return c, h * f, w * f


def _concat_alloc(g, spec, in_ch, rng):
    return sum(in_ch)


def _concat_forward(g, spec, ins, train):
    return T.concat(ins, axis=1)


def _concat_shape(g, spec, ins):
    hw = {(h, w) for _, h, w in ins}
    if len(hw) != 1:
        raise DimensionError(f"concat inputs disagree on spatial extents: {sorted(hw)}")
    return sum(c for c, _, _ in ins), *next(iter(hw))


def _add_alloc(g, spec, in_ch, rng):
    if len(set(in_ch)) != 1:
        raise DimensionError(f"add inputs disagree on channels: {in_ch}")
    return in_ch[0]


def _add_forward(g, spec, ins, train):
    out = ins[0]
    for t in ins[1:]:
        out = T.add(out, t)
    return out


def _add_shape(g, spec, ins):
    if len(set(ins)) != 1:
        raise DimensionError(f"add inputs disagree on shape: {ins}")
    return ins[0]


def _detect_alloc(g, spec, in_ch, rng):
    out = 3 * (5 + g.num_classes)
    # low objectness prior keeps early training from drowning in positives
    bias = np.zeros(out)
    bias[4::5 + g.num_classes] = -4.0
    g.alloc_conv_unit(spec.param_prefix, in_ch[0], out, 1, rng, norm=False,
                      bias=True, bias_init=bias)
    return out


def _detect_forward(g, spec, ins, train):
    return g.conv_unit(spec.param_prefix, ins[0], k=1, act="none", norm=False,
                       bias=True, train=train)


def _detect_shape(g, spec, ins):
    c, h, w = ins[0]
    return 3 * (5 + g.num_classes), h, w


_KINDS: dict[str, _Kind] = {
    "input": _Kind(lambda *a: 3, lambda *a: None, lambda *a: None),
    "focus": _Kind(_focus_alloc, lambda g, s, i, t: focus_slice(i[0]), _focus_shape),
    "cbl": _Kind(_cbl_alloc, _cbl_forward, _cbl_shape),
    "csp_dense": _Kind(_csp_alloc, _csp_forward, _csp_shape),
    "spp": _Kind(_spp_alloc, _spp_forward, _spp_shape),
    "aspp": _Kind(_aspp_alloc, _aspp_forward, _aspp_shape),
    "upsample": _Kind(_upsample_alloc, _upsample_forward, _upsample_shape),
    "concat": _Kind(_concat_alloc, _concat_forward, _concat_shape),
    "add": _Kind(_add_alloc, _add_forward, _add_shape),
    "detect": _Kind(_detect_alloc, _detect_forward, _detect_shape),
}


# ---------------------------------------------------------------------------
# CIO analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CioRow:
    block: str
    c: int
    m: int
    d: int
    dense: int
    partial: int

    @property
    def saving(self) -> float:
        return 1.0 - self.partial / self.dense if self.dense else 0.0


def analyze_cio(graph: ModelGraph) -> tuple[list[CioRow], CioRow]:
    """Per-block dense vs partial CIO with a totals row.  Shared-parameter
    blocks (unroll copies) are reported once per graph node."""
    rows = []
    seen_prefixes = set()
    for spec in graph.nodes.values():
        if spec.kind != "csp_dense" or spec.param_prefix in seen_prefixes:
            continue
        seen_prefixes.add(spec.param_prefix)
        c, m, d = spec.args["_in"], spec.args["m"], spec.args["d"]
        rows.append(CioRow(spec.param_prefix, c, m, d,
                           cio("dense", c, m, d), cio("partial_dense", c, m, d)))
    total = CioRow("total", 0, 0, 0, sum(r.dense for r in rows),
                   sum(r.partial for r in rows))
    return rows, total


# ---------------------------------------------------------------------------
# canonical graph and RFP unrolling
# ---------------------------------------------------------------------------


def build_template(cfg, seed: int = 0) -> ModelGraph:
    """Single-pass (plain feature pyramid) graph with the recursive-pyramid
    roles and feedback modules pre-allocated in its metadata.

    ``cfg`` is a :class:`cspdet.config.ModelConfig`.
    """
    rng = np.random.default_rng(seed)
    g = ModelGraph(num_classes=cfg.num_classes, stride=32)
    g._rng = rng
    act = cfg.activation
    widths = cfg.stage_channels
    ms = cfg.csp_m
    ds = cfg.csp_d
    wn = cfg.neck_channels
    if wn % 4:
        raise ConfigError(f"neck_channels must be divisible by 4 for the ASPP "
                          f"connecting module, got {wn}")

    g.add("focus", "focus", "input")
    g.add("stem", "cbl", "focus", out=cfg.stem_channels, k=3, act=act)
    prev = "stem"
    stage_out = []
    for si in range(4):
        down = g.add(f"stage{si + 1}.down", "cbl", prev, out=widths[si], k=3, s=2,
                     act=act)
        prev = g.add(f"stage{si + 1}.csp", "csp_dense", down, m=ms[si], d=ds[si],
                     out=widths[si], act=act)
        stage_out.append(prev)
    g.add("stage4.spp", "spp", prev, bins=list(cfg.spp_bins))
    prev = g.add("stage4.spp_fuse", "cbl", "stage4.spp", out=widths[3], k=1, act=act)
    stage_out[3] = prev

    # top-down pyramid over the last three stages (strides 8/16/32)
    x_nodes = stage_out[1:]
    feats: list[str] = [""] * 3
    for level in (3, 2, 1):
        lat = g.add(f"neck.lat{level}", "cbl", x_nodes[level - 1], out=wn, k=1, act=act)
        if level == 3:
            merged = lat
        else:
            up = g.add(f"neck.up{level}", "upsample", feats[level])
            merged = g.add(f"neck.merge{level}", "add", (lat, up))
        feats[level - 1] = g.add(f"neck.td{level}", "cbl", merged, out=wn, k=3, act=act)

    for level in (1, 2, 3):
        g.head_names.append(g.add(f"head{level}", "detect", feats[level - 1]))

    # feedback modules (ASPP + 1x1 projection per level): parameters exist
    # for every unroll depth, so the count is independent of T.  The fused
    # addition sits after the stage's downsampling conv, where the pyramid
    # feature's stride matches the stage interior.
    feedback = {}
    for level in (1, 2, 3):
        in_ch = widths[level]  # channels after stage{level+1}.down
        for i, (k, _, _) in enumerate(_ASPP_BRANCHES, 1):
            g.alloc_conv_unit(f"fb{level}.aspp.branch{i}", wn, wn // 4, k, rng,
                              norm=False, bias=True)
        g.alloc_conv_unit(f"fb{level}.aspp.pool", wn, wn // 4, 1, rng,
                          norm=False, bias=True)
        g.alloc_conv_unit(f"fb{level}.proj", wn, in_ch, 1, rng, norm=False, bias=True)
        feedback[level] = {"entry": f"stage{level + 1}.csp",
                           "stage_input": f"stage{level + 1}.down",
                           "feature": f"neck.td{level}",
                           "proj_channels": in_ch}
    g.meta["feedback"] = feedback
    g.meta["stem_nodes"] = ["focus", "stem", "stage1.down", "stage1.csp"]
    g.meta["anchors"] = np.asarray(cfg.anchors, dtype=float)
    g.meta["activation"] = act
    return g


def rfp_unroll(template: ModelGraph, steps: int) -> ModelGraph:
    """Unroll the recursive pyramid to ``steps`` sequential passes.

    Pass t recomputes the covered backbone stages and the top-down pyramid;
    for t >= 2 each stage input is augmented by the projected ASPP transform
    of the previous pass's pyramid feature at that level.  All per-step
    copies share the template's parameter store, and the first pass omits
    the feedback edge (its input is defined as zero, which contributes
    nothing under additive fusion).
    """
    if steps < 1:
        raise ConfigError(f"rfp unroll steps must be >= 1, got {steps}")
    if "feedback" not in template.meta:
        raise ConfigError("graph lacks recursive-pyramid roles; build it with "
                          "build_template")
    _check_acyclic(template)

    g = ModelGraph(num_classes=template.num_classes, stride=template.stride)
    g.params = template.params
    g.buffers = template.buffers
    g.meta = dict(template.meta)
    g.meta["rfp_steps"] = steps

    stem = set(template.meta["stem_nodes"]) | {template.input_name}
    feedback = template.meta["feedback"]

    for name in template.meta["stem_nodes"]:
        spec = template.nodes[name]
        g.add(name, spec.kind, spec.inputs, param_prefix=spec.param_prefix,
              **_args_copy(spec))

    def tname(name: str, t: int) -> str:
        return name if name in stem else f"t{t}.{name}"

    entry_level = {fb["entry"]: (level, fb) for level, fb in feedback.items()}
    for t in range(1, steps + 1):
        for name, spec in template.nodes.items():
            if name in stem or spec.kind in ("input", "detect"):
                continue
            inputs = tuple(tname(i, t) for i in spec.inputs)
            if t > 1 and name in entry_level:
                # feedback path R_l(f_l^{t-1}) fused additively onto the
                # stage input before the stage entry runs
                level, fb = entry_level[name]
                aspp = g.add(f"t{t}.fb{level}.aspp", "aspp",
                             tname(fb["feature"], t - 1),
                             param_prefix=f"fb{level}.aspp")
                proj = g.add(f"t{t}.fb{level}.proj", "cbl", aspp,
                             param_prefix=f"fb{level}.proj",
                             out=fb["proj_channels"], k=1, act="none", norm=False,
                             bias=True)
                fused = g.add(f"t{t}.fb{level}.add", "add",
                              (tname(fb["stage_input"], t), proj))
                inputs = (fused,) + inputs[1:]
            g.add(tname(name, t), spec.kind, inputs, param_prefix=spec.param_prefix,
                  **_args_copy(spec))

    for head in template.head_names:
        spec = template.nodes[head]
        g.head_names.append(
            g.add(head, spec.kind, tuple(tname(i, steps) for i in spec.inputs),
                  param_prefix=spec.param_prefix, **_args_copy(spec)))
    return g


def _args_copy(spec: LayerSpec) -> dict:
    return {k: v for k, v in spec.args.items() if not k.startswith("_")}


def _check_acyclic(graph: ModelGraph) -> None:
    seen = set()
    for spec in graph.nodes.values():
        for i in spec.inputs:
            if i not in seen:
                raise ConfigError(f"graph is not in topological order near "
                                  f"{spec.name!r} (cyclic or dangling input {i!r})")
        seen.add(spec.name)
