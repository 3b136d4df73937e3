"""Backbone and pyramid-enhancement stages expressed as layer graphs.

The backbone is a ResNet-50 encoder with a truncated LinkNet-style decoder:
the last decoder stage and the lowest skip connection are removed, so the
first pyramid level is the 128x128 decoder output. The dilated centre block
sits on the uppermost encoder-decoder connection.
Seven stride-2 extra blocks then halve the map down to 1x1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .dilation import DEFAULT_RATES, hdc_check
from .graph import ArchGraph, GraphError, forward

INPUT_SIZE = 512
NUM_LEVELS = 8
LEVELS = tuple(f"of_{k}" for k in range(1, NUM_LEVELS + 1))
# ResNet-50: (planes, blocks, stride) per stage, bottleneck expansion 4
RESNET50_STAGES = ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2))


@dataclass
class BackboneConfig:
    input_size: int = INPUT_SIZE
    width_div: int = 1  # divide every channel width, e.g. 16 for desk-scale runs
    center_rates: tuple[int, ...] = DEFAULT_RATES


@dataclass
class FmsSpec:
    bb1_node: str = "e2"
    bb2_node: str = "d3"
    pre_rate: int = 1
    serial_rates: tuple[int, ...] = (1, 2)
    shuffle_factor: int = 2


@dataclass
class FmreSpec:
    up_to_bottom_rates: tuple[int, ...] = DEFAULT_RATES
    down_kernel: int = 3
    down_dilation: int = 2
    head_kernel: int = 3
    head_activation: str = "mish"


@dataclass
class HeadSpec:
    anchors_per_cell: tuple[int, ...] = (4, 6, 6, 6, 6, 6, 4, 4)
    num_classes: int = 2  # background + drone


def _register_chain(g: ArchGraph, name: str, rates) -> None:
    res = hdc_check(rates)
    if not res:
        raise GraphError(name, f"dilation rates {tuple(rates)} fail the gridding check: {res.reason}")
    g.dilation_chains[name] = tuple(rates)


def _bottleneck(g: ArchGraph, name: str, src: str, cin: int, planes: int, stride: int) -> tuple[str, int]:
    cout = planes * 4
    a = g.conv_bn_act(f"{name}.a", src, cin, planes, k=1)
    b = g.conv_bn_act(f"{name}.b", a, planes, planes, k=3, s=stride)
    c = g.conv(f"{name}.c.conv", b, planes, cout, k=1)
    c = g.add(f"{name}.c.bn", "bn", c, c=cout)
    short = src
    if stride != 1 or cin != cout:
        short = g.conv(f"{name}.down.conv", src, cin, cout, k=1, s=stride, p=0)
        short = g.add(f"{name}.down.bn", "bn", short, c=cout)
    s = g.add(f"{name}.sum", "add", (c, short))
    return g.add(name, "act", s, fn="relu"), cout


def _decoder(g: ArchGraph, name: str, src: str, cin: int, cout: int) -> str:
    mid = max(cin // 4, 1)
    a = g.conv_bn_act(f"{name}.a", src, cin, mid, k=1)
    up = g.add(f"{name}.up", "deconv", a, cin=mid, cout=mid, k=3, s=2, d=1)
    up = g.add(f"{name}.up.bn", "bn", up, c=mid)
    up = g.add(f"{name}.up.act", "act", up, fn="relu")
    return g.conv_bn_act(name, up, mid, cout, k=1)


def _center_block(g: ArchGraph, name: str, src: str, c: int, rates) -> str:
    _register_chain(g, name, rates)
    prev, branches = src, [src]
    for i, r in enumerate(rates, 1):
        prev = g.conv(f"{name}.dil{i}", prev, c, c, k=3, d=r)
        prev = g.add(f"{name}.dil{i}.act", "act", prev, fn="relu")
        branches.append(prev)
    return g.add(name, "add", branches)


def build_backbone(config: BackboneConfig | None = None) -> ArchGraph:
    """Modified encoder-decoder backbone producing pyramid levels of_1..of_8."""
    config = config or BackboneConfig()
    if config.input_size != INPUT_SIZE:
        raise ValueError(f"backbone is defined for {INPUT_SIZE}x{INPUT_SIZE} input, got {config.input_size}")
    div = config.width_div
    g = ArchGraph((3, INPUT_SIZE, INPUT_SIZE))

    stem = max(64 // div, 1)
    x = g.conv_bn_act("stem", "input", 3, stem, k=7, s=2, p=3)
    x = g.add("stem.pool", "maxpool", x, k=3, s=2, p=1)
    cin = stem
    enc = []
    for si, (planes, blocks, stride) in enumerate(RESNET50_STAGES, 1):
        planes = max(planes // div, 1)
        for bi in range(blocks):
            x, cin = _bottleneck(g, f"layer{si}.{bi}", x, cin, planes, stride if bi == 0 else 1)
        g.add(f"e{si}", "act", x, fn="identity")
        x = f"e{si}"
        enc.append(cin)
    c1, c2, c3, c4 = enc

    # decoder: bottom skip dropped, centre block moved to the top connection
    d4 = _decoder(g, "d4", "e4", c4, c3)
    d3 = g.add("d3", "add", (_decoder(g, "dec3", d4, c3, c2), "e2"))
    center = _center_block(g, "center", "e1", c1, config.center_rates)
    g.add("d2", "add", (_decoder(g, "dec2", d3, c2, c1), center))

    prev = g.add("of_1", "act", "d2", fn="identity")
    g.outputs["of_1"] = prev
    for k in range(2, NUM_LEVELS + 1):
        red = g.conv_bn_act(f"extra{k}.a", prev, c1, max(c1 // 2, 1), k=1)
        prev = g.conv_bn_act(f"of_{k}", red, max(c1 // 2, 1), c1, k=3, s=2)
        g.outputs[f"of_{k}"] = prev
    return g


def attach_fms(graph: ArchGraph, spec: FmsSpec | None = None) -> ArchGraph:
    """Fuse two backbone taps into a supplement map and add it onto of_1."""
    spec = spec or FmsSpec()
    g = graph.copy()
    shapes = g.infer_shapes()
    for nid in (spec.bb1_node, spec.bb2_node):
        if nid not in shapes:
            raise GraphError(nid, "tap node does not exist")
    cb1, h, w = shapes[spec.bb1_node]
    cb2, h2, w2 = shapes[spec.bb2_node]
    if (h, w) != (h2, w2):
        raise GraphError(spec.bb2_node, f"spatial size {(h2, w2)} differs from {spec.bb1_node} {(h, w)}")
    target = g.outputs["of_1"]
    c1, th, tw = shapes[target]
    f = spec.shuffle_factor
    if (h * f, w * f) != (th, tw):
        raise GraphError(spec.bb1_node, f"{h}x{w} taps do not upsample by {f} onto {th}x{tw}")
    n_sub = 2
    sub_c = c1 * f * f // n_sub
    if (sub_c * n_sub) % (f * f):
        raise GraphError("fms.cat", "pre-shuffle channels not divisible by factor^2")
    _register_chain(g, "fms.bb1", spec.serial_rates)
    _register_chain(g, "fms.bb2", (spec.pre_rate, *spec.serial_rates))

    subs = []
    for l in range(1, n_sub + 1):
        pre = g.conv(f"fms.sub{l}.pre", spec.bb2_node, cb2, c1, k=3, d=spec.pre_rate)
        pre = g.add(f"fms.sub{l}.pre.act", "act", pre, fn="relu")
        x = g.add(f"fms.sub{l}.cat", "concat", (spec.bb1_node, pre))
        cin = cb1 + c1
        for i, r in enumerate(spec.serial_rates, 1):
            x = g.conv(f"fms.sub{l}.dil{i}", x, cin, sub_c, k=3, d=r)
            x = g.add(f"fms.sub{l}.dil{i}.act", "act", x, fn="relu")
            cin = sub_c
        subs.append(x)
    cat = g.add("fms.cat", "concat", subs)
    sup = g.add("fms.shuffle", "shuffle", cat, f=f)
    g.outputs["of_1"] = g.add("of_1.fms", "add", (target, sup))
    g.outputs["fms"] = sup
    return g


def attach_fmre(graph: ArchGraph, spec: FmreSpec | None = None) -> ArchGraph:
    """Bottom-to-up strided dilated enhancement followed by up-to-bottom pixel-shuffle fusion."""
    spec = spec or FmreSpec()
    g = graph.copy()
    shapes = g.infer_shapes()
    maps = [g.outputs[name] for name in LEVELS if name in g.outputs]
    if len(maps) < 2:
        raise GraphError("fmre", "needs at least two pyramid levels")
    chans = {shapes[m][0] for m in maps}
    if len(chans) != 1:
        raise GraphError("fmre", f"pyramid levels must share a channel width, got {sorted(chans)}")
    c = chans.pop()
    n = len(maps)
    kd, dd = spec.down_kernel, spec.down_dilation

    # bottom to up: enhanced(l) = fm(l) + strided dilated conv(fm(l - 1))
    btu = [maps[0]]
    for l in range(1, n):
        down = g.conv(f"fmre.down{l + 1}", maps[l - 1], c, c, k=kd, s=2, d=dd)
        btu.append(g.add(f"fmre.btu{l + 1}", "add", (maps[l], down)))

    # up to bottom: concat the upper map with its dilated maps and shuffle to 2x before adding below
    top = [None] * n
    top[-1] = btu[-1]
    for l in range(n - 2, -1, -1):
        upper = top[l + 1]
        _register_chain(g, f"fmre.up{l + 1}", spec.up_to_bottom_rates)
        x, parts = upper, [upper]
        for i, r in enumerate(spec.up_to_bottom_rates, 1):
            x = g.conv(f"fmre.up{l + 1}.dil{i}", x, c, c, k=3, d=r)
            x = g.add(f"fmre.up{l + 1}.dil{i}.act", "act", x, fn="relu")
            parts.append(x)
        cat = g.add(f"fmre.up{l + 1}.cat", "concat", parts)
        up = g.add(f"fmre.up{l + 1}.shuffle", "shuffle", cat, f=2)
        top[l] = g.add(f"fmre.top{l + 1}", "add", (btu[l], up))

    for l in range(n):
        h = g.conv(f"enh_{l + 1}.conv", top[l], c, c, k=spec.head_kernel)
        g.outputs[f"enh_{l + 1}"] = g.add(f"enh_{l + 1}", "act", h, fn=spec.head_activation)
    return g


def attach_heads(graph: ArchGraph, spec: HeadSpec | None = None, source: str = "enh") -> ArchGraph:
    """Per-level 3x3 class and box regressors (SSD convention)."""
    spec = spec or HeadSpec()
    g = graph.copy()
    shapes = g.infer_shapes()
    for k, a in enumerate(spec.anchors_per_cell, 1):
        src = g.outputs.get(f"{source}_{k}")
        if src is None:
            continue
        c = shapes[src][0]
        g.outputs[f"cls_{k}"] = g.conv(f"cls_{k}", src, c, a * spec.num_classes, k=3)
        g.outputs[f"loc_{k}"] = g.conv(f"loc_{k}", src, c, a * 4, k=3)
    return g


def build_detector(config: BackboneConfig | None = None, fms: FmsSpec | None = None,
                   fmre: FmreSpec | None = None, heads: HeadSpec | None = None) -> ArchGraph:
    g = build_backbone(config)
    g = attach_fms(g, fms)
    g = attach_fmre(g, fmre)
    return attach_heads(g, heads)


def level_table(graph: ArchGraph, prefix: str = "of") -> list[dict]:
    """Rows of (name, channels, size, stride) for each pyramid level."""
    shapes = graph.infer_shapes()
    size = graph.declared_input[1]
    rows = []
    for k in range(1, NUM_LEVELS + 1):
        nid = graph.outputs.get(f"{prefix}_{k}")
        if nid is None:
            continue
        c, h, w = shapes[nid]
        rows.append({"name": f"{prefix}_{k}", "node": nid, "channels": c, "height": h, "width": w, "stride": size // h})
    return rows


def run(graph: ArchGraph, x, seed_or_weights=0) -> dict:
    """Forward pass returning only the named outputs."""
    vals = forward(graph, x, seed_or_weights)
    return {name: vals[nid] for name, nid in graph.outputs.items()}
