import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dronedet.anchors import Box
from oracles import random_boxes, ref_iou, ref_match
from dronedet.matching import (
    Detection, MatchResult, decode, encode, iou, iou_matrix, match, nms, smooth_l1, ssd_loss,
)


def test_iou_examples():
    assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 1, 1), (0, 0, 0.5, 1)) == 0.5
    assert iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_iou_symmetric_and_matrix_agrees(seed):
    rng = np.random.default_rng(seed)
    a, b = random_boxes(rng, 4), random_boxes(rng, 3)
    m = iou_matrix(a, b)
    for i in range(4):
        assert ref_iou(a[i], a[i]) == 1.0
        for j in range(3):
            assert m[i, j] == ref_iou(a[i], b[j]) == ref_iou(b[j], a[i])
            assert 0 <= m[i, j] <= 1


def test_match_equals_oracle_random():
    rng = np.random.default_rng(7)
    for _ in range(300):
        anchors = random_boxes(rng, int(rng.integers(1, 31)))
        gts = random_boxes(rng, int(rng.integers(0, 6)))
        m = match(anchors, gts)
        assign, forced = ref_match(anchors, gts)
        assert m.gt_index.tolist() == assign
        assert m.forced.tolist() == forced


def test_match_invariants():
    rng = np.random.default_rng(11)
    for _ in range(200):
        anchors = random_boxes(rng, int(rng.integers(5, 31)))
        gts = random_boxes(rng, int(rng.integers(1, 6)))
        m = match(anchors, gts)
        assert set(range(len(gts))) <= set(m.gt_index[m.positive].tolist())
        free = m.positive & ~m.forced
        assert np.all(m.best_iou[free] >= 0.5)
        assert len(set(m.gt_index[m.forced].tolist())) == m.forced.sum()


def test_match_examples():
    anchors = np.array([[0, 0, 0.2, 0.2], [0.5, 0.5, 0.7, 0.7], [0.8, 0.8, 1, 1]])
    m = match(anchors, [[0.5, 0.5, 0.7, 0.7]])
    assert m.gt_index.tolist() == [-1, 0, -1]
    m = match(anchors, [[0.45, 0.45, 0.75, 0.75]])  # IoU 0.44 with its best anchor
    assert m.gt_index.tolist() == [-1, 0, -1] and m.forced[1]
    assert match(anchors, []).num_positive == 0
    m = match(anchors, [[0.5, 0.5, 0.7, 0.7]], labels=[3])
    assert m.labels.tolist() == [0, 3, 0]


def test_encode_decode():
    a = np.array([0.2, 0.2, 0.4, 0.6])
    np.testing.assert_array_equal(encode(a, a), [0, 0, 0, 0])
    t = encode(a, a + [0.1, 0, 0.1, 0])
    assert t[0] == pytest.approx(0.5 / 0.1)
    rng = np.random.default_rng(3)
    lo = rng.uniform(0, 0.8, size=(10**4, 2, 2))
    size = rng.uniform(0.01, 0.2, size=(10**4, 2, 2))
    anc = np.concatenate([lo[:, 0], lo[:, 0] + size[:, 0]], axis=1)
    gt = np.concatenate([lo[:, 1], lo[:, 1] + size[:, 1]], axis=1)
    assert np.max(np.abs(decode(anc, encode(anc, gt)) - gt)) <= 1e-9
    with pytest.raises(ValueError):
        encode([0.1, 0.1, 0.1, 0.3], a)


def test_loss_hand_fixture():
    m = MatchResult(
        gt_index=np.array([0, -1, -1, -1, -1]), forced=np.array([True, False, False, False, False]),
        labels=np.array([1, 0, 0, 0, 0]), offsets=np.array([[0.5, 0, 0, 0]] + [[0, 0, 0, 0]] * 4),
        best_iou=np.zeros(5),
    )
    scores = np.array([[0, 0], [0, 0], [0, 1], [0, -1], [0, 2]], dtype=float)
    total, conf, loc = ssd_loss(scores, np.zeros((5, 4)), m)
    expect_conf = 2 * math.log(2) + math.log(1 + math.e) + math.log(1 + math.e ** 2)
    assert loc == pytest.approx(0.125, abs=1e-15)
    assert conf == pytest.approx(expect_conf, abs=1e-12)
    assert total == pytest.approx(expect_conf + 0.125, abs=1e-12)
    t0, c0, _ = ssd_loss(scores, np.zeros((5, 4)), m, loc_weight=0)
    assert t0 == pytest.approx(c0)
    with pytest.raises(ValueError):
        ssd_loss(scores[:4], np.zeros((5, 4)), m)


def test_loss_perfect_and_nonnegative():
    rng = np.random.default_rng(2)
    anchors = random_boxes(rng, 20)
    m = match(anchors, random_boxes(rng, 3))
    perfect = np.where(np.eye(2)[m.labels] > 0, 50.0, -50.0)
    total, conf, loc = ssd_loss(perfect, m.offsets, m)
    assert loc == 0.0 and conf < 1e-20
    for _ in range(20):
        t, c, l = ssd_loss(rng.normal(size=(20, 2)), rng.normal(size=(20, 4)), m)
        assert t >= 0 and c >= 0 and l >= 0


def ref_nms(dets, thr):
    remaining = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    keep = []
    while remaining:
        i = remaining.pop(0)
        keep.append(i)
        remaining = [j for j in remaining if not (dets[j].image_id == dets[i].image_id
                                                  and dets[j].class_id == dets[i].class_id
                                                  and ref_iou(dets[i].box, dets[j].box) > thr)]
    return [dets[i] for i in keep]


def test_nms():
    d = Detection("a", Box(0, 0, 1, 1), 0.9)
    assert nms([d]) == [d]
    e = Detection("a", Box(0, 0, 1, 1), 0.8, det_id=1)
    assert nms([e, d]) == [d]
    rng = np.random.default_rng(9)
    for _ in range(50):
        dets = [Detection(str(rng.integers(2)), Box(*b), float(rng.integers(5)) / 5, det_id=i)
                for i, b in enumerate(random_boxes(rng, 10))]
        assert nms(dets) == ref_nms(dets, 0.5)


def test_detection_rejects_nan():
    with pytest.raises(ValueError):
        Detection("a", Box(0, 0, 1, 1), float("nan"))


def test_smooth_l1():
    np.testing.assert_allclose(smooth_l1(np.array([-2.0, -0.5, 0, 0.5, 2])), [1.5, 0.125, 0, 0.125, 1.5])
