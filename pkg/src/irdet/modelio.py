"""Model file format.

Layout: magic line, one canonical-JSON header line (format version, graph
topology, per-tensor shapes, bn hyperparameters, metadata), then raw
float32 little-endian parameter blobs in header declaration order.
save -> load -> save is byte-exact; float32 -> float64 -> float32 loses
nothing on re-save.
"""
from __future__ import annotations

import json

import numpy as np

from .graph import LayerNode, ModelGraph
from .tensor import BNParams, Tensor

MAGIC = b"IRDET1\n"
FORMAT_VERSION = 1

_BN_KEYS = ("gamma", "beta", "running_mean", "running_var")


def _tensor_entries(graph):
    """(node, key, array) triples in declaration order."""
    out = []
    for node in graph.nodes:
        if node.name in graph.params and "weights_from" not in node.attrs:
            p = graph.params[node.name]
            out.append((node.name, "weight", p["weight"].data))
            if p.get("bias") is not None:
                out.append((node.name, "bias", p["bias"].data))
        if node.name in graph.bns:
            bn = graph.bns[node.name]
            arrays = (bn.gamma.data, bn.beta.data, bn.running_mean, bn.running_var)
            out.extend((node.name, k, a) for k, a in zip(_BN_KEYS, arrays))
    return out


def save_model(graph, path):
    entries = _tensor_entries(graph)
    header = {
        "format": FORMAT_VERSION,
        "meta": graph.meta,
        "input": graph.input_name,
        "heads": graph.head_names,
        "nodes": [
            {
                "name": n.name,
                "kind": n.kind,
                "inputs": n.inputs,
                "attrs": n.attrs,
                "cls": n.cls,
                "level": n.level,
            }
            for n in graph.nodes
        ],
        "bn": {
            name: {"eps": bn.eps, "momentum": bn.momentum} for name, bn in graph.bns.items()
        },
        "tensors": [[node, key, list(a.shape)] for node, key, a in entries],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(blob)
        f.write(b"\n")
        for _, _, a in entries:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_model(path):
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a model file (bad magic)")
        header = json.loads(f.readline().decode())
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format {header.get('format')}")
        nodes = [
            LayerNode(d["name"], d["kind"], list(d["inputs"]), dict(d["attrs"]),
                      d.get("cls"), d.get("level"))
            for d in header["nodes"]
        ]
        params, bns = {}, {}
        loaded = {}
        for node_name, key, shape in header["tensors"]:
            n = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float64)
            loaded[(node_name, key)] = raw.reshape(shape)
        for d in header["nodes"]:
            name = d["name"]
            if (name, "weight") in loaded:
                params[name] = {
                    "weight": Tensor(loaded[(name, "weight")], requires_grad=True),
                    "bias": (
                        Tensor(loaded[(name, "bias")], requires_grad=True)
                        if (name, "bias") in loaded else None
                    ),
                }
            if (name, "gamma") in loaded:
                hp = header["bn"][name]
                bns[name] = BNParams(
                    gamma=Tensor(loaded[(name, "gamma")], requires_grad=True),
                    beta=Tensor(loaded[(name, "beta")], requires_grad=True),
                    running_mean=loaded[(name, "running_mean")].copy(),
                    running_var=loaded[(name, "running_var")].copy(),
                    eps=hp["eps"],
                    momentum=hp["momentum"],
                )
    graph = ModelGraph(nodes, params, bns, header["input"], header["heads"], header["meta"])
    return graph.validate()
