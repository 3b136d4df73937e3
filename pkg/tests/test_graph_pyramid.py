import numpy as np
import pytest

from dronedet.dilation import hdc_check
from dronedet.graph import ArchGraph, GraphError, forward, init_weights, probe_weights, receptive_field
from dronedet.pyramid import (
    BackboneConfig, attach_fms, attach_fmre, attach_heads, build_backbone, build_detector, level_table,
)
from dronedet.tensorcore import Grid


@pytest.fixture(scope="module")
def detector():
    return build_detector(BackboneConfig(width_div=16))


@pytest.fixture(scope="module")
def detector_run(detector):
    x = Grid(np.random.default_rng(0).normal(size=detector.declared_input))
    return x, forward(detector, x, 0)


def impulse_support(graph, node, pos):
    """Input cells whose unit impulse changes node[pos] under all-ones weights."""
    c, h, w = graph.declared_input
    weights = probe_weights(graph)
    found = set()
    for y in range(h):
        for x in range(w):
            a = np.zeros((c, h, w))
            a[:, y, x] = 1.0
            out = forward(graph, Grid(a), weights, activation="identity")[node].data
            if np.any(out[:, pos[0], pos[1]] != 0):
                found.add((y, x))
    return found


def small_graph():
    g = ArchGraph((2, 12, 12))
    g.conv("c1", "input", 2, 3, k=3, d=2)
    g.add("p", "maxpool", "c1", k=3, s=2, p=1)
    g.conv("c2", "p", 3, 4, k=3, s=2)
    g.add("up", "deconv", "c2", cin=4, cout=4, k=3, s=2, d=1)
    g.add("sh", "shuffle", "up", f=2)
    g.conv("c3", "input", 2, 1, k=1)
    g.add("cat", "concat", ("sh", "c3"))
    g.conv("c4", "cat", 2, 2, k=3)
    g.add("sum", "add", ("c4", "input"))
    return g


@pytest.mark.parametrize("node,pos", [("sum", (0, 0)), ("sum", (5, 7)), ("c2", (1, 2)), ("sh", (11, 3)), ("up", (2, 5))])
def test_receptive_field_matches_impulse_probe(node, pos):
    g = small_graph()
    assert receptive_field(g, node, pos) == impulse_support(g, node, pos)


def test_receptive_field_examples():
    g = ArchGraph((1, 9, 9))
    g.conv("c", "input", 1, 1, k=3)
    assert receptive_field(g, "c", (4, 4)) == {(y, x) for y in (3, 4, 5) for x in (3, 4, 5)}
    g = ArchGraph((1, 9, 9))
    g.conv("s", "input", 1, 1, k=3, s=2, p=0)
    assert receptive_field(g, "s", (0, 0)) == {(y, x) for y in range(3) for x in range(3)}
    with pytest.raises(IndexError):
        receptive_field(g, "s", (4, 0))
    with pytest.raises(KeyError):
        receptive_field(g, "nope", (0, 0))


def serial(rates, n=31):
    g = ArchGraph((1, n, n))
    prev = "input"
    for i, r in enumerate(rates):
        prev = g.conv(f"d{i}", prev, 1, 1, k=3, d=r)
    return g, prev


def has_interior_gap(cells):
    ys = [y for y, _ in cells]
    xs = [x for _, x in cells]
    return len(cells) < (max(ys) - min(ys) + 1) * (max(xs) - min(xs) + 1)


def test_serial_dilation_receptive_fields():
    g, out = serial([1, 2, 3])
    assert not has_interior_gap(receptive_field(g, out, (15, 15)))
    g, out = serial([3, 3, 3])
    assert has_interior_gap(receptive_field(g, out, (15, 15)))


def test_text_round_trip_golden():
    g = small_graph()
    g.outputs["main"] = "sum"
    g.dilation_chains["demo"] = (1, 2)
    text = g.to_text()
    assert text.splitlines()[0] == "# dronedet-graph/1 input=2x12x12"
    assert "c1\tconv\tcin=2;cout=3;k=3;s=1;d=2;p=2\tinput" in text
    assert "@chain\tdemo\t1,2" in text
    back = ArchGraph.from_text(text)
    assert back.to_text() == text
    assert back.infer_shapes() == g.infer_shapes()


def test_graph_errors_carry_node_id():
    g = ArchGraph((1, 4, 4))
    with pytest.raises(GraphError):
        g.add("x", "conv", "missing", cin=1, cout=1, k=3, s=1, d=1, p=1)
    g.conv("bad", "input", 2, 1)
    with pytest.raises(GraphError) as e:
        g.infer_shapes()
    assert e.value.node == "bad"


def test_backbone_rejects_other_sizes():
    with pytest.raises(ValueError):
        build_backbone(BackboneConfig(input_size=300))


def test_halving_chain_and_strides(detector):
    rows = level_table(detector, "of")
    assert [r["height"] for r in rows] == [128, 64, 32, 16, 8, 4, 2, 1]
    assert [r["stride"] for r in rows] == [4, 8, 16, 32, 64, 128, 256, 512]


def test_inferred_equals_executed(detector, detector_run):
    _, vals = detector_run
    shapes = detector.infer_shapes()
    assert all(vals[k].shape == shapes[k] for k in shapes)


def test_fms_and_fmre_preserve_shapes(detector):
    shapes = detector.infer_shapes()
    assert shapes["of_1.fms"] == shapes["of_1"] == shapes["fms.shuffle"]
    for k in range(1, 9):
        assert shapes[detector.outputs[f"enh_{k}"]] == shapes[f"of_{k}"]
    for k in range(1, 8):
        c = shapes[f"of_{k + 1}"][0]
        assert shapes[f"fmre.up{k}.cat"][0] == 4 * c
        assert shapes[f"fmre.up{k}.shuffle"][1] == 2 * shapes[f"of_{k + 1}"][1]
    assert shapes["fms.cat"][0] % 4 == 0


def test_registered_chains_pass(detector):
    assert {"center", "fms.bb1", "fms.bb2"} <= set(detector.dilation_chains)
    assert all(hdc_check(r) for r in detector.dilation_chains.values())


def test_bad_chain_rejected():
    with pytest.raises(GraphError):
        build_backbone(BackboneConfig(width_div=16, center_rates=(3, 3, 3)))


def test_forward_deterministic(detector, detector_run):
    x, vals = detector_run
    again = forward(detector, x, 0)
    nid = detector.outputs["enh_1"]
    assert vals[nid].data.tobytes() == again[nid].data.tobytes()


def test_head_linearity(detector, detector_run):
    x, vals = detector_run
    w = init_weights(detector, 0)
    wt, b = w["cls_3"]
    w["cls_3"] = (2 * wt, b)
    doubled = forward(detector, x, w)["cls_3"].data
    np.testing.assert_allclose(doubled, 2 * vals["cls_3"].data, rtol=1e-12, atol=1e-12)


def test_fms_grows_receptive_field():
    base = build_backbone(BackboneConfig(width_div=16))
    fused = attach_fms(base)
    before = receptive_field(base, base.outputs["of_1"], (0, 0))
    after = receptive_field(fused, fused.outputs["of_1"], (0, 0))
    assert before < after


def test_zero_upper_map_leaves_lower_unchanged():
    g = ArchGraph((4, 8, 8))
    g.outputs["of_1"] = g.add("of_1", "act", "input", fn="identity")
    g.outputs["of_2"] = g.conv("of_2", "of_1", 4, 4, k=3, s=2)
    g = attach_fmre(g)
    w = init_weights(g, 3)
    for nid in ("of_2", "fmre.down2"):
        cout, cin, k, _ = w[nid][0].shape
        w[nid] = (np.zeros((cout, cin, k, k)), np.zeros(cout))
    x = Grid(np.random.default_rng(1).normal(size=(4, 8, 8)))
    vals = forward(g, x, w)
    assert vals["fmre.top1"] == vals["of_1"]


def test_heads_shapes(detector):
    shapes = detector.infer_shapes()
    assert shapes["cls_1"] == (4 * 2, 128, 128)
    assert shapes["loc_2"] == (6 * 4, 64, 64)
    g = attach_heads(build_backbone(BackboneConfig(width_div=16)), source="of")
    assert "cls_8" in g.outputs
