"""Layer graphs that infer shapes and run seeded forward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import ConvSpec, Grid, ShapeError

GRAPH_SCHEMA = "dronedet-graph/1"

KINDS = ("input", "conv", "deconv", "bn", "act", "maxpool", "concat", "add", "shuffle")
ACTIVATIONS = {"relu": tc.relu, "mish": tc.mish, "identity": lambda g: g}


class GraphError(ValueError):
    """A node failed validation or execution; ``node`` carries its id."""

    def __init__(self, node: str, message: str):
        super().__init__(f"node {node!r}: {message}")
        self.node = node


@dataclass
class Node:
    id: str
    kind: str
    params: dict
    inputs: tuple[str, ...] = ()


@dataclass
class ArchGraph:
    declared_input: tuple[int, int, int]
    nodes: dict[str, Node] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    # named serial dilation sequences registered by the builders
    dilation_chains: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.nodes:
            c, h, w = self.declared_input
            self.nodes["input"] = Node("input", "input", {"c": c, "h": h, "w": w})

    def add(self, node_id: str, kind: str, inputs=(), **params) -> str:
        if node_id in self.nodes:
            raise GraphError(node_id, "duplicate node id")
        if kind not in KINDS or kind == "input":
            raise GraphError(node_id, f"unknown node kind {kind!r}")
        inputs = (inputs,) if isinstance(inputs, str) else tuple(inputs)
        for src in inputs:
            if src not in self.nodes:
                raise GraphError(node_id, f"input {src!r} does not exist")
        self.nodes[node_id] = Node(node_id, kind, dict(params), inputs)
        return node_id

    def conv(self, node_id, src, cin, cout, k=3, s=1, d=1, p=None) -> str:
        if p is None:
            p = d * (k - 1) // 2
        return self.add(node_id, "conv", src, cin=cin, cout=cout, k=k, s=s, d=d, p=p)

    def conv_bn_act(self, node_id, src, cin, cout, k=3, s=1, d=1, p=None, fn="relu") -> str:
        c = self.conv(f"{node_id}.conv", src, cin, cout, k, s, d, p)
        b = self.add(f"{node_id}.bn", "bn", c, c=cout)
        return self.add(node_id, "act", b, fn=fn)

    def copy(self) -> "ArchGraph":
        g = ArchGraph(self.declared_input)
        g.nodes = {k: Node(n.id, n.kind, dict(n.params), n.inputs) for k, n in self.nodes.items()}
        g.outputs = dict(self.outputs)
        g.dilation_chains = dict(self.dilation_chains)
        return g

    def consumers(self, node_id: str) -> list[str]:
        return [n.id for n in self.nodes.values() if node_id in n.inputs]

    def infer_shapes(self) -> dict[str, tuple[int, int, int]]:
        shapes: dict[str, tuple[int, int, int]] = {}
        for n in self.nodes.values():
            try:
                shapes[n.id] = _infer(n, [shapes[i] for i in n.inputs])
            except (ShapeError, ValueError) as e:
                if isinstance(e, GraphError):
                    raise
                raise GraphError(n.id, str(e)) from e
        return shapes

    # -- text form: one node per line, tab separated ------------------------

    def to_text(self) -> str:
        c, h, w = self.declared_input
        lines = [f"# {GRAPH_SCHEMA} input={c}x{h}x{w}"]
        for n in self.nodes.values():
            if n.kind == "input":
                continue
            params = ";".join(f"{k}={v}" for k, v in n.params.items())
            lines.append(f"{n.id}\t{n.kind}\t{params}\t{','.join(n.inputs)}")
        for name, nid in self.outputs.items():
            lines.append(f"@output\t{name}\t{nid}")
        for name, rates in self.dilation_chains.items():
            lines.append(f"@chain\t{name}\t{','.join(map(str, rates))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchGraph":
        lines = text.splitlines()
        head = lines[0].split()
        if len(head) != 3 or head[1] != GRAPH_SCHEMA or not head[2].startswith("input="):
            raise ValueError(f"not a {GRAPH_SCHEMA} document")
        c, h, w = (int(v) for v in head[2][len("input=") :].split("x"))
        g = cls((c, h, w))
        for line in lines[1:]:
            if not line.strip():
                continue
            parts = line.split("\t")
            if parts[0] == "@output":
                g.outputs[parts[1]] = parts[2]
            elif parts[0] == "@chain":
                g.dilation_chains[parts[1]] = tuple(int(v) for v in parts[2].split(","))
            else:
                nid, kind, params, inputs = parts
                kv = dict(item.split("=", 1) for item in params.split(";") if item)
                g.add(nid, kind, tuple(i for i in inputs.split(",") if i), **{k: _parse_value(v) for k, v in kv.items()})
        return g


def _parse_value(v: str):
    try:
        return int(v)
    except ValueError:
        return v


def _infer(n: Node, ins: list[tuple[int, int, int]]) -> tuple[int, int, int]:
    p = n.params
    if n.kind == "input":
        return (p["c"], p["h"], p["w"])
    if n.kind in ("conv", "deconv"):
        (c, h, w), = ins
        if c != p["cin"]:
            raise ShapeError(f"expects {p['cin']} channels, producer gives {c}", "channels")
        if n.kind == "conv":
            oh = tc.conv_out_size(h, p["k"], p["s"], p["d"], p["p"])
            ow = tc.conv_out_size(w, p["k"], p["s"], p["d"], p["p"])
        else:
            if p["s"] not in (1, 2):
                raise ValueError(f"unsupported transposed stride {p['s']}")
            tc.transposed_crop(p["k"], p["s"], p["d"])
            oh, ow = tc.transposed_out_size(h, p["s"]), tc.transposed_out_size(w, p["s"])
        if oh < 1 or ow < 1:
            raise ShapeError(f"output size {oh}x{ow} < 1", "height" if oh < 1 else "width")
        return (p["cout"], oh, ow)
    if n.kind == "bn":
        (c, h, w), = ins
        if c != p["c"]:
            raise ShapeError(f"expects {p['c']} channels, producer gives {c}", "channels")
        return (c, h, w)
    if n.kind == "act":
        if p["fn"] not in ACTIVATIONS:
            raise ValueError(f"unknown activation {p['fn']!r}")
        return ins[0]
    if n.kind == "maxpool":
        (c, h, w), = ins
        return (c, tc.conv_out_size(h, p["k"], p["s"], 1, p["p"]), tc.conv_out_size(w, p["k"], p["s"], 1, p["p"]))
    if n.kind == "concat":
        h, w = ins[0][1:]
        for s in ins:
            if s[1:] != (h, w):
                raise ShapeError(f"concat spatial mismatch {s[1:]} vs {(h, w)}", "height" if s[1] != h else "width")
        return (sum(s[0] for s in ins), h, w)
    if n.kind == "add":
        for s in ins[1:]:
            if s != ins[0]:
                raise ShapeError(f"add shape mismatch {s} vs {ins[0]}", "shape")
        return ins[0]
    if n.kind == "shuffle":
        (c, h, w), = ins
        f = p["f"]
        if c % (f * f):
            raise ShapeError(f"{c} channels not divisible by {f * f}", "channels")
        return (c // (f * f), h * f, w * f)
    raise ValueError(f"unknown kind {n.kind!r}")


# -- weights ----------------------------------------------------------------


def init_weights(graph: ArchGraph, seed: int = 0) -> dict:
    """He-normal conv weights with zero biases; batch norm starts as the identity.

    Each node draws from its own stream keyed by (seed, node position), so
    editing one part of a graph leaves the other nodes' weights unchanged
    only if node order is preserved.
    """
    weights = {}
    for idx, n in enumerate(graph.nodes.values()):
        p = n.params
        if n.kind in ("conv", "deconv"):
            rng = np.random.default_rng([seed, idx])
            fan_in = p["cin"] * p["k"] * p["k"]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(p["cout"], p["cin"], p["k"], p["k"]))
            weights[n.id] = (w, np.zeros(p["cout"]))
        elif n.kind == "bn":
            c = p["c"]
            weights[n.id] = (np.zeros(c), np.ones(c), np.ones(c), np.zeros(c))
    return weights


def probe_weights(graph: ArchGraph) -> dict:
    """All-ones kernels with zero biases, so every path has positive gain."""
    weights = {}
    for n in graph.nodes.values():
        p = n.params
        if n.kind in ("conv", "deconv"):
            weights[n.id] = (np.ones((p["cout"], p["cin"], p["k"], p["k"])), np.zeros(p["cout"]))
        elif n.kind == "bn":
            c = p["c"]
            weights[n.id] = (np.zeros(c), np.ones(c), np.ones(c), np.zeros(c))
    return weights


def forward(graph: ArchGraph, x: Grid, weights=0, activation: str | None = None) -> dict[str, Grid]:
    """Execute every node in insertion order and return all node outputs.

    ``weights`` is a seed or a mapping from node id to parameters.
    ``activation`` overrides every activation node (``"identity"`` for probing).
    """
    if isinstance(weights, (int, np.integer)):
        weights = init_weights(graph, int(weights))
    if x.shape != tuple(graph.declared_input):
        raise GraphError("input", f"got {x.shape}, graph declares {tuple(graph.declared_input)}")
    vals: dict[str, Grid] = {}
    for n in graph.nodes.values():
        try:
            vals[n.id] = _execute(n, [vals[i] for i in n.inputs], weights, activation, x)
        except (ShapeError, ValueError) as e:
            if isinstance(e, GraphError):
                raise
            raise GraphError(n.id, str(e)) from e
    return vals


def _execute(n: Node, ins, weights, activation, x) -> Grid:
    p = n.params
    if n.kind == "input":
        return x
    if n.kind in ("conv", "deconv"):
        w, b = weights[n.id]
        spec = ConvSpec(p["cin"], p["cout"], p["k"], p["s"], p["d"], p.get("p", 0), w, b, transposed=n.kind == "deconv")
        return tc.conv2d(ins[0], spec) if n.kind == "conv" else tc.conv_transpose2d(ins[0], spec)
    if n.kind == "bn":
        return tc.batch_norm(ins[0], *weights[n.id])
    if n.kind == "act":
        return ACTIVATIONS[activation or p["fn"]](ins[0])
    if n.kind == "maxpool":
        return tc.max_pool2d(ins[0], p["k"], p["s"], p["p"])
    if n.kind == "concat":
        return tc.concat_channels(ins)
    if n.kind == "add":
        out = ins[0]
        for g in ins[1:]:
            out = tc.add_elementwise(out, g)
        return out
    if n.kind == "shuffle":
        return tc.pixel_shuffle(ins[0], p["f"])
    raise ValueError(f"unknown kind {n.kind!r}")


# -- receptive fields -------------------------------------------------------


def receptive_field(graph: ArchGraph, output_node: str, output_pos: tuple[int, int]) -> set[tuple[int, int]]:
    """Input cells with a nonzero path to ``output_node`` at ``output_pos``.

    Propagates boolean dependency masks backwards through the graph. Under
    all-ones kernels and identity activations every path has positive gain,
    so this is exactly the support of the impulse response.
    """
    shapes = graph.infer_shapes()
    if output_node not in shapes:
        raise KeyError(f"unknown node {output_node!r}")
    c, h, w = shapes[output_node]
    y, x = output_pos
    if not (0 <= y < h and 0 <= x < w):
        raise IndexError(f"position {output_pos} outside {h}x{w} map of {output_node!r}")
    masks: dict[str, np.ndarray] = {output_node: np.zeros((c, h, w), dtype=bool)}
    masks[output_node][:, y, x] = True
    for n in reversed(list(graph.nodes.values())):
        m = masks.pop(n.id, None) if n.kind != "input" else masks.get(n.id)
        if m is None or n.kind == "input":
            continue
        for src, mi in zip(n.inputs, _backprop_mask(n, m, [shapes[i] for i in n.inputs])):
            if src in masks:
                masks[src] |= mi
            else:
                masks[src] = mi
    m = masks.get("input")
    if m is None:
        return set()
    ys, xs = np.nonzero(m.any(axis=0))
    return set(zip(ys.tolist(), xs.tolist()))


def _spread(spatial: np.ndarray, in_hw, k, s, d, pad) -> np.ndarray:
    """Input cells touched by conv taps from the marked output cells."""
    h, w = in_hw
    oh, ow = spatial.shape
    acc = np.zeros((h + 2 * pad, w + 2 * pad), dtype=bool)
    for ky in range(k):
        for kx in range(k):
            acc[ky * d : ky * d + (oh - 1) * s + 1 : s, kx * d : kx * d + (ow - 1) * s + 1 : s] |= spatial
    return acc[pad : pad + h, pad : pad + w]


def _backprop_mask(n: Node, m: np.ndarray, in_shapes):
    p = n.params
    if n.kind == "conv":
        c, h, w = in_shapes[0]
        sp = _spread(m.any(axis=0), (h, w), p["k"], p["s"], p["d"], p["p"])
        return [np.broadcast_to(sp, (c, h, w)).copy()]
    if n.kind == "deconv":
        c, h, w = in_shapes[0]
        k, s, d = p["k"], p["s"], p["d"]
        front, back = tc.transposed_crop(k, s, d)
        full = np.pad(m.any(axis=0), ((front, back), (front, back)))
        sp = np.zeros((h, w), dtype=bool)
        for ky in range(k):
            for kx in range(k):
                sp |= full[ky * d : ky * d + (h - 1) * s + 1 : s, kx * d : kx * d + (w - 1) * s + 1 : s]
        return [np.broadcast_to(sp, (c, h, w)).copy()]
    if n.kind == "maxpool":
        c, h, w = in_shapes[0]
        return [np.stack([_spread(ch, (h, w), p["k"], p["s"], 1, p["p"]) for ch in m])]
    if n.kind in ("bn", "act"):
        return [m.copy()]
    if n.kind == "add":
        return [m.copy() for _ in in_shapes]
    if n.kind == "concat":
        out, start = [], 0
        for c, _, _ in in_shapes:
            out.append(m[start : start + c].copy())
            start += c
        return out
    if n.kind == "shuffle":
        return [tc.pixel_unshuffle(Grid(m.astype(np.float64)), p["f"]).data > 0]
    raise ValueError(f"unknown kind {n.kind!r}")
