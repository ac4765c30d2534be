"""Layer-graph IR: node records, validation, forward execution, accounting.

A ModelGraph is an ordered DAG of LayerNodes (inputs always precede
consumers) plus parameter storage keyed by node name. Convolutions carry
exactly one prunability classification read by the pruning engine:

    prunable   | pre_attention | pre_fusion | head_output

Nodes may share weights (attrs["weights_from"]) for blocks that apply one
kernel twice.
"""
from __future__ import annotations

import copy as _copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import BNParams, Tensor

CONV_CLASSES = ("prunable", "pre_attention", "pre_fusion", "head_output")


class GraphError(ValueError):
    pass


@dataclass
class LayerNode:
    name: str
    kind: str
    inputs: list = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    cls: str | None = None  # conv nodes only
    level: int | None = None  # residual-level coupling id


def conv_out_hw(h, w, k, stride, padding, dilation):
    span = dilation * (k - 1) + 1
    return (h + 2 * padding - span) // stride + 1, (w + 2 * padding - span) // stride + 1


class ModelGraph:
    """Ordered layer nodes + parameters; the unit of training and surgery."""

    def __init__(self, nodes, params, bns, input_name, head_names, meta):
        self.nodes = list(nodes)
        self.params = params  # name -> {"weight": Tensor, "bias": Tensor?}
        self.bns = bns  # name -> BNParams
        self.input_name = input_name
        self.head_names = list(head_names)
        self.meta = dict(meta)
        self.by_name = {n.name: n for n in self.nodes}

    # ------------------------------------------------------------------
    def validate(self, img_hw=None):
        seen = set()
        for node in self.nodes:
            if node.name in seen:
                raise GraphError(f"duplicate node name {node.name!r}")
            seen.add(node.name)
            for src in node.inputs:
                if src not in seen:
                    raise GraphError(
                        f"node {node.name!r} consumes {src!r} before it is defined (cycle or dangling input)"
                    )
            if node.kind == "conv" and node.cls not in CONV_CLASSES:
                raise GraphError(f"conv {node.name!r} has classification {node.cls!r}")
        if self.head_names and len(self.head_names) != 3:
            raise GraphError(f"detector graphs expose exactly 3 heads, got {len(self.head_names)}")
        for h in self.head_names:
            if h not in seen:
                raise GraphError(f"head output {h!r} is not a node")
        if img_hw is None:
            img_hw = (self.meta.get("img_size", 96), self.meta.get("img_size", 96))
        self.infer_shapes(img_hw)  # raises on channel/shape inconsistencies
        return self

    def infer_shapes(self, img_hw):
        """Static (C, H, W) per node at batch size 1; raises GraphError on mismatch."""
        shapes = {}
        for node in self.nodes:
            k, a = node.kind, node.attrs
            ins = [shapes[s] for s in node.inputs]
            if k == "input":
                s = a.get("stride", 1)  # subgraph taps may sit below stride 1
                shapes[node.name] = (a["channels"], img_hw[0] // s, img_hw[1] // s)
                continue
            c, h, w = ins[0]
            if k == "conv":
                if c != a["cin"]:
                    raise GraphError(
                        f"conv {node.name!r} expects {a['cin']} input channels, got {c}"
                    )
                ho, wo = conv_out_hw(h, w, a["k"], a["stride"], a["padding"], a["dilation"])
                if ho < 1 or wo < 1:
                    raise GraphError(f"conv {node.name!r} collapses spatial dims to {ho}x{wo}")
                shapes[node.name] = (a["cout"], ho, wo)
            elif k == "bn":
                if c != a["channels"]:
                    raise GraphError(f"bn {node.name!r} has {a['channels']} channels, input has {c}")
                shapes[node.name] = ins[0]
            elif k in ("leaky", "sigmoid"):
                shapes[node.name] = ins[0]
            elif k == "add":
                for j, s in enumerate(ins[1:], 1):
                    if s != ins[0]:
                        raise GraphError(
                            f"add {node.name!r} operand {j} shape {s} != {ins[0]}"
                        )
                shapes[node.name] = ins[0]
            elif k == "mul":
                c2, h2, w2 = ins[1]
                for dim, (x1, x2) in enumerate(zip(ins[0], ins[1])):
                    if x1 != x2 and 1 not in (x1, x2):
                        raise GraphError(
                            f"mul {node.name!r} dimension {dim}: {x1} vs {x2} not broadcastable"
                        )
                shapes[node.name] = (max(c, c2), max(h, h2), max(w, w2))
            elif k == "concat":
                if any(s[1:] != ins[0][1:] for s in ins):
                    raise GraphError(f"concat {node.name!r} spatial dims differ")
                shapes[node.name] = (sum(s[0] for s in ins), h, w)
            elif k == "split":
                if c % a["parts"]:
                    raise GraphError(f"split {node.name!r}: {c} channels not divisible")
                shapes[node.name] = (c // a["parts"], h, w)
            elif k == "gap":
                shapes[node.name] = (c, 1, 1)
            elif k == "chan1d":
                shapes[node.name] = ins[0]
            elif k == "upsample":
                shapes[node.name] = (c, h * a["factor"], w * a["factor"])
            else:
                raise GraphError(f"unknown node kind {k!r}")
        return shapes

    # ------------------------------------------------------------------
    def node_params(self, node):
        src = node.attrs.get("weights_from", node.name)
        return self.params[src]

    def forward(self, x, training=False, want=None):
        """Run the graph; `x` is an array / Tensor (single input) or a dict of
        feeds for subgraph tests. Returns the head tensors (or `want` names).
        """
        feeds = x if isinstance(x, dict) else {self.input_name: x}
        vals = {}
        targets = want if want is not None else (self.head_names or [self.nodes[-1].name])
        for node in self.nodes:
            k, a = node.kind, node.attrs
            if k == "input":
                v = feeds[node.name]
                vals[node.name] = v if isinstance(v, Tensor) else Tensor(v)
                continue
            ins = [vals[s] for s in node.inputs]
            if k == "conv":
                p = self.node_params(node)
                out = T.conv2d(
                    ins[0], p["weight"], p.get("bias"),
                    stride=a["stride"], padding=a["padding"], dilation=a["dilation"],
                )
            elif k == "bn":
                out = T.batchnorm(ins[0], self.bns[node.name], training)
            elif k == "leaky":
                out = T.leaky_relu(ins[0], a["slope"])
            elif k == "sigmoid":
                out = T.sigmoid(ins[0])
            elif k == "add":
                out = ins[0]
                for other in ins[1:]:
                    out = T.add(out, other)
            elif k == "mul":
                out = T.mul(ins[0], ins[1])
            elif k == "concat":
                out = T.concat(ins, axis=1)
            elif k == "split":
                step = ins[0].shape[1] // a["parts"]
                i = a["part"]
                out = ins[0][:, i * step : (i + 1) * step]
            elif k == "gap":
                out = T.adaptive_avg_pool(ins[0])
            elif k == "chan1d":
                out = self._chan1d(node, ins[0])
            elif k == "upsample":
                out = T.upsample_nearest(ins[0], a["factor"])
            else:
                raise GraphError(f"unknown node kind {k!r}")
            vals[node.name] = out
        return [vals[t] for t in targets]

    def _chan1d(self, node, x):
        # pooled [B,C,1,1] -> length-C sequence -> k-tap conv -> back.
        # After surgery the surviving channels keep their original slots
        # (zero fill) so the conv windows are unchanged.
        B, C = x.shape[0], x.shape[1]
        a = node.attrs
        seq = T.reshape(x, (B, C))
        positions = a.get("positions")
        if positions is not None:
            seq4 = T.reshape(seq, (B, C, 1, 1))
            seq4 = T.scatter_channels(seq4, positions, a["orig_len"])
            seq = T.reshape(seq4, (B, a["orig_len"]))
        p = self.node_params(node)
        y = T.conv1d(T.reshape(seq, (B, 1, seq.shape[1])), p["weight"])
        if p.get("bias") is not None:
            y = T.add(y, p["bias"])
        if positions is not None:
            y = T.getitem(y, (slice(None), slice(None), np.asarray(positions, dtype=np.intp)))
        return T.reshape(y, (B, C, 1, 1))

    # ------------------------------------------------------------------
    def parameters(self):
        out = []
        for node in self.nodes:
            if node.name in self.params:
                p = self.params[node.name]
                out.append(p["weight"])
                if p.get("bias") is not None:
                    out.append(p["bias"])
            if node.name in self.bns:
                out.extend((self.bns[node.name].gamma, self.bns[node.name].beta))
        return out

    def decayed_parameters(self):
        """Conv weights only; BN scales/shifts and biases are never decayed."""
        return [self.params[n.name]["weight"] for n in self.nodes if n.name in self.params]

    def conv_nodes(self):
        return [n for n in self.nodes if n.kind == "conv"]

    def bn_after(self, conv_name):
        """The bn node fed directly by this conv, or None."""
        for node in self.nodes:
            if node.kind == "bn" and node.inputs == [conv_name]:
                return node
        return None

    def consumers(self):
        out = {n.name: [] for n in self.nodes}
        for node in self.nodes:
            for src in node.inputs:
                out[src].append(node.name)
        return out

    def copy(self):
        params = {
            name: {
                k: (Tensor(v.data.copy(), requires_grad=v.requires_grad) if v is not None else None)
                for k, v in d.items()
            }
            for name, d in self.params.items()
        }
        bns = {}
        for name, bn in self.bns.items():
            bns[name] = BNParams(
                gamma=Tensor(bn.gamma.data.copy(), requires_grad=True),
                beta=Tensor(bn.beta.data.copy(), requires_grad=True),
                running_mean=bn.running_mean.copy(),
                running_var=bn.running_var.copy(),
                eps=bn.eps,
                momentum=bn.momentum,
            )
        return ModelGraph(
            [_copy.deepcopy(n) for n in self.nodes], params, bns,
            self.input_name, list(self.head_names), _copy.deepcopy(self.meta),
        )


# ---------------------------------------------------------------------------
# accounting


def count_params(graph):
    """Learnable parameter count (conv weights/biases, bn scale/shift)."""
    total = 0
    for node in graph.nodes:
        if node.name in graph.params:
            p = graph.params[node.name]
            total += p["weight"].size
            if p.get("bias") is not None:
                total += p["bias"].size
        if node.name in graph.bns:
            total += 2 * graph.bns[node.name].channels
    return total


def count_flops(graph, img_hw):
    """Analytic per-image FLOPs (multiply+add counted) at the given input size.

    Matches the runtime instrumentation in irdet.tensor exactly: convs cost
    2*k^2*Cin*Cout*H'*W' (+bias adds), bn 2 ops/element, activations and
    elementwise ops 1 op/element (sigmoid 4: the tally of its stable form),
    pure data movement (upsample/split/concat) is free.
    """
    if isinstance(img_hw, int):
        img_hw = (img_hw, img_hw)
    shapes = graph.infer_shapes(img_hw)
    total = 0
    for node in graph.nodes:
        k, a = node.kind, node.attrs
        if k == "input":
            continue
        c, h, w = shapes[node.name]
        n = c * h * w
        if k == "conv":
            total += 2 * a["k"] * a["k"] * a["cin"] * a["cout"] * h * w
            if a["bias"]:
                total += a["cout"] * h * w
        elif k == "bn":
            total += 2 * n
        elif k == "leaky":
            total += n
        elif k == "sigmoid":
            total += 4 * n
        elif k == "add":
            total += (len(node.inputs) - 1) * n
        elif k == "mul":
            total += n
        elif k == "gap":
            total += shapes[node.inputs[0]][0] * shapes[node.inputs[0]][1] * shapes[node.inputs[0]][2]
        elif k == "chan1d":
            length = a.get("orig_len") or c
            total += 2 * a["k"] * length + (length if a.get("bias", True) else 0)
        # upsample / split / concat: data movement only
    return total


def measure_flops(graph, img_hw, training=False):
    """Instrumented forward at batch 1: tallies the multiply-accumulates the
    ops actually execute. Independent cross-check for count_flops."""
    if isinstance(img_hw, int):
        img_hw = (img_hw, img_hw)
    cin = graph.by_name[graph.input_name].attrs["channels"]
    x = np.zeros((1, cin) + tuple(img_hw))
    with T.no_grad(), T.profiler:
        graph.forward(x, training=training)
        return T.profiler.flops
