"""Graph builders: attention gate, residual unit, dilated fusion block,
pyramid neck, and the full three-head detector.

Widths are config-driven; the "toy" preset is the desk-scale default and
"full" mirrors production-scale widths for accounting experiments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import GraphError, LayerNode, ModelGraph
from .tensor import BNParams, Tensor

LEAKY_SLOPE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.03


class GraphBuilder:
    def __init__(self, rng):
        self.nodes = []
        self.params = {}
        self.bns = {}
        self.rng = rng

    def _push(self, kind, name, inputs, attrs=None, cls=None, level=None):
        self.nodes.append(LayerNode(name, kind, list(inputs), attrs or {}, cls, level))
        return name

    def input(self, name, channels):
        return self._push("input", name, [], {"channels": int(channels)})

    def conv(self, name, src, cin, cout, k, stride=1, padding=0, dilation=1,
             bias=False, cls="prunable", level=None, weights_from=None, w_std=None):
        attrs = {
            "cin": int(cin), "cout": int(cout), "k": int(k), "stride": int(stride),
            "padding": int(padding), "dilation": int(dilation), "bias": bool(bias),
        }
        if weights_from:
            attrs["weights_from"] = weights_from
        else:
            if w_std is None:
                fan_in = cin * k * k
                w_std = math.sqrt(2.0 / (fan_in * (1.0 + LEAKY_SLOPE**2)))
            p = {"weight": Tensor(self.rng.normal(0.0, w_std, size=(cout, cin, k, k)),
                                  requires_grad=True)}
            p["bias"] = Tensor(np.zeros(cout), requires_grad=True) if bias else None
            self.params[name] = p
        return self._push("conv", name, [src], attrs, cls=cls, level=level)

    def bn(self, name, src, channels):
        self.bns[name] = BNParams.create(channels, eps=BN_EPS, momentum=BN_MOMENTUM)
        return self._push("bn", name, [src], {"channels": int(channels)})

    def leaky(self, name, src):
        return self._push("leaky", name, [src], {"slope": LEAKY_SLOPE})

    def sigmoid(self, name, src):
        return self._push("sigmoid", name, [src])

    def add(self, name, srcs):
        return self._push("add", name, srcs)

    def mul(self, name, a, b):
        return self._push("mul", name, [a, b])

    def concat(self, name, srcs):
        return self._push("concat", name, srcs)

    def split(self, name, src, part, parts=2):
        return self._push("split", name, [src], {"part": int(part), "parts": int(parts)})

    def gap(self, name, src):
        return self._push("gap", name, [src])

    def chan1d(self, name, src, k=3):
        self.params[name] = {
            "weight": Tensor(self.rng.normal(0.0, 1.0 / math.sqrt(k), size=(1, 1, k)),
                             requires_grad=True),
            "bias": Tensor(np.zeros(1), requires_grad=True),
        }
        return self._push("chan1d", name, [src], {"k": int(k), "bias": True})

    def upsample(self, name, src, factor):
        return self._push("upsample", name, [src], {"factor": int(factor)})

    def cba(self, prefix, src, cin, cout, k, stride=1, padding=0, dilation=1,
            cls="prunable", level=None):
        """conv + bn + leaky, the house block."""
        c = self.conv(prefix, src, cin, cout, k, stride, padding, dilation,
                      bias=False, cls=cls, level=level)
        b = self.bn(prefix + ".bn", c, cout)
        return self.leaky(prefix + ".act", b)

    def finish(self, input_name, head_names, meta):
        return ModelGraph(self.nodes, self.params, self.bns, input_name, head_names, meta)


# ---------------------------------------------------------------------------
# blocks


def add_attention_gate(b, prefix, src, channels, level=None):
    """Multiplicative channel+spatial attention: out = x * sigmoid(ca * sa).

    Spatial branch: 1x1 reduce to C/16, split in half, each half through a
    3x3 dilated conv applied twice (rates 1 and 4), concat, 1x1 down to one
    map. Channel branch: global pool -> 3-tap conv across channels.
    """
    C = int(channels)
    if C < 32 or C % 32 != 0:
        raise GraphError(
            f"attention gate {prefix!r} needs channels >= 32 and divisible by 32, got {C}"
        )
    hidden = C // 16
    half = hidden // 2
    pool = b.gap(f"{prefix}.pool", src)
    ca = b.chan1d(f"{prefix}.cconv", pool, k=3)
    red = b.conv(f"{prefix}.reduce", src, C, hidden, k=1, bias=True, level=level)
    h0 = b.split(f"{prefix}.h0", red, 0)
    h1 = b.split(f"{prefix}.h1", red, 1)
    d1a = b.conv(f"{prefix}.d1a", h0, half, half, k=3, padding=1, dilation=1, bias=True)
    d1b = b.conv(f"{prefix}.d1b", d1a, half, half, k=3, padding=1, dilation=1,
                 bias=True, weights_from=d1a)
    d4a = b.conv(f"{prefix}.d4a", h1, half, half, k=3, padding=4, dilation=4, bias=True)
    d4b = b.conv(f"{prefix}.d4b", d4a, half, half, k=3, padding=4, dilation=4,
                 bias=True, weights_from=d4a)
    cat = b.concat(f"{prefix}.cat", [d1b, d4b])
    sa = b.conv(f"{prefix}.squash", cat, hidden, 1, k=1, bias=True)
    att = b.mul(f"{prefix}.att", ca, sa)
    gate = b.sigmoid(f"{prefix}.gate", att)
    return b.mul(f"{prefix}.out", src, gate)


def add_res_unit(b, prefix, src, channels, level=None, attention=True):
    """1x1 bottleneck then 3x3 expand, optional attention gate, shortcut add."""
    C = int(channels)
    if C % 2 != 0:
        raise GraphError(f"res unit {prefix!r} needs even channels, got {C}")
    mid = b.cba(f"{prefix}.conv1", src, C, C // 2, k=1)
    body = b.cba(f"{prefix}.conv2", mid, C // 2, C, k=3, padding=1,
                 cls="pre_attention" if attention else "prunable", level=level)
    if attention:
        body = add_attention_gate(b, f"{prefix}.att", body, C, level=level)
    return b.add(f"{prefix}.add", [src, body])


def add_dilated_fusion(b, prefix, src, channels):
    """Three parallel 3x3 convs at dilation 1/2/3, concat, 1x1 fuse back."""
    C = int(channels)
    branches = [
        b.cba(f"{prefix}.d{d}", src, C, C, k=3, padding=d, dilation=d)
        for d in (1, 2, 3)
    ]
    cat = b.concat(f"{prefix}.cat", branches)
    return b.cba(f"{prefix}.fuse", cat, 3 * C, C, k=1)


def add_pyramid_neck(b, prefix, taps, tap_channels, widths):
    """Bi-directional fusion neck over three taps (strides 8/16/32).

    Top-down mids M_i = in_i + Up(M_{i+1}); bottom-up outs
    O_i = in_i + M_i + Down(O_{i-1}); the deepest aligned input passes
    through the dilated fusion block, and single-input pass-through nodes
    are elided (the deepest mid and the shallowest out).
    """
    if len(taps) != 3:
        raise GraphError(f"pyramid neck wants 3 taps, got {len(taps)}")
    n1, n2, n3 = widths
    a1 = b.cba(f"{prefix}.align1", taps[0], tap_channels[0], n1, k=1)
    a2 = b.cba(f"{prefix}.align2", taps[1], tap_channels[1], n2, k=1)
    a3 = b.cba(f"{prefix}.align3", taps[2], tap_channels[2], n3, k=1, cls="pre_fusion")
    f3 = add_dilated_fusion(b, f"{prefix}.ffa", a3, n3)  # also the elided deepest mid
    u2 = b.cba(f"{prefix}.up2_conv", f3, n3, n2, k=1)
    m2 = b.add(f"{prefix}.mid2", [a2, b.upsample(f"{prefix}.up2", u2, 2)])
    u1 = b.cba(f"{prefix}.up1_conv", m2, n2, n1, k=1)
    m1 = b.add(f"{prefix}.mid1", [a1, b.upsample(f"{prefix}.up1", u1, 2)])
    o1 = m1  # shallowest out == its mid (no deeper bottom-up input)
    d12 = b.cba(f"{prefix}.down12", o1, n1, n2, k=3, stride=2, padding=1)
    o2 = b.add(f"{prefix}.out2", [a2, m2, d12])
    d23 = b.cba(f"{prefix}.down23", o2, n2, n3, k=3, stride=2, padding=1)
    o3 = b.add(f"{prefix}.out3", [f3, d23])
    return [o1, o2, o3]


def add_fpn_neck(b, prefix, taps, tap_channels, widths):
    """Top-down-only baseline: out_i = 1x1(concat(in_i, Up(out_{i+1})))."""
    n1, n2, n3 = widths
    a1 = b.cba(f"{prefix}.align1", taps[0], tap_channels[0], n1, k=1)
    a2 = b.cba(f"{prefix}.align2", taps[1], tap_channels[1], n2, k=1)
    a3 = b.cba(f"{prefix}.align3", taps[2], tap_channels[2], n3, k=1)
    o3 = a3
    u2 = b.cba(f"{prefix}.up2_conv", o3, n3, n2, k=1)
    c2 = b.concat(f"{prefix}.cat2", [a2, b.upsample(f"{prefix}.up2", u2, 2)])
    o2 = b.cba(f"{prefix}.fuse2", c2, 2 * n2, n2, k=1)
    u1 = b.cba(f"{prefix}.up1_conv", o2, n2, n1, k=1)
    c1 = b.concat(f"{prefix}.cat1", [a1, b.upsample(f"{prefix}.up1", u1, 2)])
    o1 = b.cba(f"{prefix}.fuse1", c1, 2 * n1, n1, k=1)
    return [o1, o2, o3]


# ---------------------------------------------------------------------------
# whole-model assembly


DEFAULT_ANCHORS = (
    ((5.0, 8.0), (9.0, 5.0), (10.0, 16.0)),
    ((16.0, 10.0), (14.0, 24.0), (24.0, 16.0)),
    ((24.0, 40.0), (40.0, 26.0), (52.0, 52.0)),
)


@dataclass
class DetectorConfig:
    name: str = "toy"
    in_channels: int = 1
    stem_width: int = 8
    pre_widths: tuple = (16, 32)
    pre_res: tuple = (0, 1)
    level_widths: tuple = (64, 128, 256)
    level_depths: tuple = (1, 1, 1)
    attention: bool = True
    neck: str = "pyramid"
    neck_widths: tuple = (32, 64, 128)
    num_classes: int = 2
    anchors: tuple = DEFAULT_ANCHORS
    img_size: int = 96

    def validate(self):
        if len(self.level_widths) != 3 or len(self.level_depths) != 3:
            raise GraphError("detector needs exactly three backbone levels")
        if self.neck not in ("pyramid", "fpn"):
            raise GraphError(f"unknown neck kind {self.neck!r}")
        if self.num_classes < 1:
            raise GraphError("num_classes must be >= 1")
        if len(self.anchors) != 3 or any(len(a) != len(self.anchors[0]) for a in self.anchors):
            raise GraphError("anchors must be 3 heads x A priors")
        if self.attention:
            for w in self.level_widths:
                if w < 32 or w % 32:
                    raise GraphError(
                        f"attention level width {w} must be >= 32 and divisible by 32"
                    )
        if self.img_size % 32:
            raise GraphError("img_size must be a multiple of 32")
        return self


PRESETS = {}


def register_preset(name, factory):
    PRESETS[name] = factory


def get_config(name):
    if name not in PRESETS:
        raise GraphError(f"unknown model preset {name!r} (have {sorted(PRESETS)})")
    return PRESETS[name]()


register_preset("toy", lambda: DetectorConfig())
register_preset(
    "fpn-baseline", lambda: DetectorConfig(name="fpn-baseline", neck="fpn", attention=False)
)
register_preset(
    "full",
    lambda: DetectorConfig(
        name="full", stem_width=32, pre_widths=(64, 128), pre_res=(1, 2),
        level_widths=(256, 512, 1024), level_depths=(8, 8, 4),
        neck_widths=(128, 256, 512), img_size=416,
        anchors=(
            ((10.0, 13.0), (16.0, 30.0), (33.0, 23.0)),
            ((30.0, 61.0), (62.0, 45.0), (59.0, 119.0)),
            ((116.0, 90.0), (156.0, 198.0), (373.0, 326.0)),
        ),
    ),
)


def build_detector(config, seed=0):
    """Assemble backbone (stride-2 downs + residual units with attention),
    fusion neck, and three prediction heads at strides 8/16/32."""
    cfg = config.validate()
    b = GraphBuilder(np.random.default_rng([int(seed), 0xD37EC7]))
    x = b.input("image", cfg.in_channels)
    cur = b.cba("stem", x, cfg.in_channels, cfg.stem_width, k=3, padding=1)
    prev = cfg.stem_width
    for i, w in enumerate(cfg.pre_widths):
        cur = b.cba(f"pre{i}.down", cur, prev, w, k=3, stride=2, padding=1)
        for r in range(cfg.pre_res[i]):
            att = cfg.attention and w >= 32 and w % 32 == 0
            cur = add_res_unit(b, f"pre{i}.ru{r}", cur, w, level=100 + i, attention=att)
        prev = w
    taps = []
    for i, (w, depth) in enumerate(zip(cfg.level_widths, cfg.level_depths), 1):
        cur = b.cba(f"b{i}.down", cur, prev, w, k=3, stride=2, padding=1)
        for r in range(depth):
            cur = add_res_unit(b, f"b{i}.ru{r}", cur, w, level=i, attention=cfg.attention)
        taps.append(cur)
        prev = w
    neck = add_pyramid_neck if cfg.neck == "pyramid" else add_fpn_neck
    outs = neck(b, "neck", taps, cfg.level_widths, cfg.neck_widths)

    A = len(cfg.anchors[0])
    out_ch = A * (5 + cfg.num_classes)
    heads = []
    for i, (o, n) in enumerate(zip(outs, cfg.neck_widths), 1):
        stem = b.cba(f"head{i}.conv", o, n, 2 * n, k=3, padding=1)
        hc = b.conv(f"head{i}.out", stem, 2 * n, out_ch, k=1, bias=True,
                    cls="head_output", w_std=0.01)
        # objectness prior ~1%: keeps early confidences low
        bias = b.params[hc]["bias"].data
        for a in range(A):
            bias[a * (5 + cfg.num_classes) + 4] = -math.log(99.0)
        heads.append(hc)

    meta = {
        "preset": cfg.name,
        "num_classes": cfg.num_classes,
        "img_size": cfg.img_size,
        "anchors": [[list(a) for a in head] for head in cfg.anchors],
        "strides": [8, 16, 32],
        "neck": cfg.neck,
        "attention": cfg.attention,
    }
    return b.finish(x, heads, meta).validate()
