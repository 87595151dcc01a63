import math

import numpy as np
import pytest

from spectrack.config import DESK_PROFILE
from spectrack.data import CropMapping
from spectrack.head import (
    HeadOutput,
    decode,
    focal_loss,
    frame_loss,
    gaussian_target,
    giou,
    giou_loss,
    head_forward,
    init_head_params,
    l1_loss,
    total_loss,
)
from spectrack.model import Tracker, init_params
from spectrack.numerics import ParamStore, Tensor, grad_check

CFG = DESK_PROFILE


# -- focal loss -------------------------------------------------------------------


def test_focal_single_cell_hand_value():
    # y=1, p=0.5, alpha=2 -> 0.25 * ln 2
    cla = Tensor(np.array([[[0.5]]]))
    val = focal_loss(cla, np.array([[1.0]]), alpha=2.0, beta=4.0).item()
    assert val == pytest.approx(0.25 * math.log(2), abs=1e-12)


def test_focal_perfect_prediction_near_zero():
    eps = 1e-7
    target = np.zeros((3, 3))
    target[1, 1] = 1.0
    p = np.full((1, 3, 3), eps)
    p[0, 1, 1] = 1 - eps
    assert focal_loss(Tensor(p), target).item() <= 1e-5


def test_focal_negative_only_limit():
    for eps in (1e-3, 1e-5, 1e-7):
        p = np.full((1, 2, 2), eps)
        val = focal_loss(Tensor(p), np.zeros((2, 2))).item()
        assert val < 1e-4
    assert focal_loss(Tensor(np.full((1, 2, 2), 1e-7)), np.zeros((2, 2))).item() \
        < focal_loss(Tensor(np.full((1, 2, 2), 1e-3)), np.zeros((2, 2))).item()


def test_focal_rejects_out_of_range():
    with pytest.raises(ValueError):
        focal_loss(Tensor(np.array([[[1.0]]])), np.array([[1.0]]))
    with pytest.raises(ValueError):
        focal_loss(Tensor(np.array([[[0.5]]])), np.array([[1.5]]))


def test_focal_gaussian_penalty_reduction():
    # a near-positive neighbour is penalized less than a far-away cell
    target = gaussian_target(5, (2, 2), sigma=1.0)
    p = np.full((1, 5, 5), 0.5)
    base = focal_loss(Tensor(p), target).item()
    assert base > 0
    assert target[2, 2] == 1.0 and target[2, 3] > target[0, 0]


def test_focal_grad_check():
    target = gaussian_target(4, (1, 2), sigma=1.0)
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 4, 4))

    def fn(x):
        return focal_loss(x.sigmoid(), target)

    assert grad_check(fn, [logits]) <= 1e-6


# -- giou / l1 ------------------------------------------------------------------------


def test_giou_identical_boxes():
    pred = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    assert giou(pred, np.array([1.0, 2.0, 3.0, 4.0])).item() == pytest.approx(1.0, abs=1e-12)
    assert giou_loss(pred, np.array([1.0, 2.0, 3.0, 4.0])).item() == pytest.approx(0.0, abs=1e-12)


def test_giou_hand_example():
    # [0,0,2,2] vs [1,1,2,2]: IoU 1/7, enclosing 9 -> GIoU = -5/63
    pred = Tensor(np.array([0.0, 0.0, 2.0, 2.0]))
    gt = np.array([1.0, 1.0, 2.0, 2.0])
    assert giou(pred, gt).item() == pytest.approx(-5.0 / 63.0, abs=1e-12)
    assert giou_loss(pred, gt).item() == pytest.approx(1.0 + 5.0 / 63.0, abs=1e-12)


def test_giou_far_separated_limit():
    pred = Tensor(np.array([0.0, 0.0, 1.0, 1.0]))
    gt = np.array([1e6, 1e6, 1.0, 1.0])
    assert giou(pred, gt).item() == pytest.approx(-1.0, abs=1e-4)
    assert giou_loss(pred, gt).item() == pytest.approx(2.0, abs=1e-4)


def test_giou_degenerate_gt_rejected():
    with pytest.raises(ValueError):
        giou(Tensor(np.ones(4)), np.array([0.0, 0.0, 0.0, 1.0]))


def test_giou_range_property():
    rng = np.random.default_rng(1)
    for _ in range(200):
        pred = Tensor(np.concatenate([rng.uniform(-10, 10, 2), rng.uniform(0.5, 8, 2)]))
        gt = np.concatenate([rng.uniform(-10, 10, 2), rng.uniform(0.5, 8, 2)])
        g = giou(pred, gt).item()
        assert -1.0 - 1e-9 <= g <= 1.0 + 1e-9


def test_giou_matches_pixel_rasterized_iou():
    # when enclosing box == union's bounding box, GIoU == IoU; checked against
    # a brute-force rasterized IoU on random integer boxes
    rng = np.random.default_rng(2)
    for _ in range(50):
        x1, y1 = rng.integers(0, 10, 2)
        w1, h1 = rng.integers(1, 10, 2)
        # nested box: guaranteed enclosing == outer
        x2 = x1 + rng.integers(0, w1)
        y2 = y1 + rng.integers(0, h1)
        w2 = rng.integers(1, w1 - (x2 - x1) + 1)
        h2 = rng.integers(1, h1 - (y2 - y1) + 1)
        grid = np.zeros((40, 40), dtype=int)
        grid[y1:y1 + h1, x1:x1 + w1] += 1
        grid[y2:y2 + h2, x2:x2 + w2] += 1
        inter = (grid == 2).sum()
        union = (grid > 0).sum()
        raster_iou = inter / union
        g = giou(Tensor(np.array([x1, y1, w1, h1], dtype=float)),
                 np.array([x2, y2, w2, h2], dtype=float)).item()
        assert g == pytest.approx(raster_iou, abs=1e-9)


def test_giou_grad_check():
    gt = np.array([1.0, 1.0, 3.0, 2.0])
    assert grad_check(lambda p: giou_loss(p, gt),
                      [np.array([0.5, 0.8, 2.5, 2.2])]) <= 1e-6


def test_l1_loss_mean_absolute():
    pred = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    gt = np.array([1.5, 2.0, 2.0, 5.0])
    assert l1_loss(pred, gt).item() == pytest.approx((0.5 + 0 + 1 + 1) / 4, abs=1e-12)


# -- total loss -------------------------------------------------------------------------


def test_total_loss_zero_case():
    z = Tensor(np.array(0.0))
    assert total_loss(z, z, z).item() == 0.0


def test_total_loss_weighted_composition():
    # (1, 0.2, 0.1) with lambda1=5, lambda2=2 -> 2.2
    a, b, c = Tensor(np.array(1.0)), Tensor(np.array(0.2)), Tensor(np.array(0.1))
    assert total_loss(a, b, c, 5.0, 2.0).item() == pytest.approx(2.2, abs=1e-12)


def test_total_loss_degenerate_weights():
    a, b, c = Tensor(np.array(1.3)), Tensor(np.array(9.0)), Tensor(np.array(7.0))
    assert total_loss(a, b, c, 0.0, 0.0).item() == pytest.approx(1.3, abs=1e-15)


# -- head forward / decode ----------------------------------------------------------------


def _tracker(seed=0):
    params = init_params(CFG, seed=seed)
    return Tracker(CFG, params)


def test_head_all_alive_bijective_scatter():
    tracker = _tracker()
    rng = np.random.default_rng(3)
    res = tracker.forward(rng.uniform(0, 1, (48, 48, 8)),
                          [rng.uniform(0, 1, (96, 96, 8))] * 2,
                          rho=1.0, use_elimination=False)
    assert res.tokens.alive.all()
    for h in res.heads:
        assert h.cla.shape == (1, 12, 12)
        assert h.bbox.shape == (4, 12, 12)
        assert 0 < h.cla.data.min() and h.cla.data.max() < 1
        assert h.bbox.data.min() > 0


def test_head_constant_rows_constant_maps():
    params = init_params(CFG, seed=0)
    from spectrack.embed import TokenSet

    C = CFG.channels
    row = np.random.default_rng(4).normal(size=C)
    L = 1 + 36 + 288
    tokens = TokenSet(tokens=Tensor(np.tile(row, (L, 1))), l_prompt=1,
                      l_template=36, n_frames=2, grid=12,
                      alive=np.ones(L, dtype=bool))
    outs = head_forward(tokens, params, CFG)
    for h in outs:
        assert np.abs(h.cla.data - h.cla.data[0, 0, 0]).max() < 1e-9
        assert np.abs(h.bbox.data - h.bbox.data[:, :1, :1]).max() < 1e-9


def test_head_placeholder_only_at_eliminated_cells():
    tracker = _tracker()
    rng = np.random.default_rng(5)
    res = tracker.forward(rng.uniform(0, 1, (48, 48, 8)),
                          [rng.uniform(0, 1, (96, 96, 8))] * 2, rho=0.6)
    dropped = set()
    for tr in res.traces:
        dropped |= set(tr.dropped)
    assert dropped
    # scribbling the placeholder changes exactly the eliminated cells' features
    params = tracker.params
    from spectrack.head import head_forward as hf
    before = [h.cla.data.copy() for h in hf(res.tokens, params, CFG)]
    params.set_value("head.placeholder",
                     params["head.placeholder"].data + 10.0)
    after = [h.cla.data.copy() for h in hf(res.tokens, params, CFG)]
    changed = any(not np.array_equal(a, b) for a, b in zip(before, after))
    assert changed


def test_decode_centered_peak_hand_geometry():
    gs = 12
    crop = 96
    cla = np.full((1, gs, gs), 1e-4)
    cla[0, 6, 6] = 0.999
    bbox = np.full((4, gs, gs), 1e-6)
    bbox[:, 6, 6] = 8.0 / crop  # (l,t,r,b) = 8 px each -> 16x16 box
    out = HeadOutput(cla=Tensor(cla), bbox=Tensor(bbox))
    det = decode(out, CropMapping(x0=0.0, y0=0.0, scale=1.0), crop)
    cx, cy = (6 + 0.5) * (crop / gs), (6 + 0.5) * (crop / gs)
    assert np.allclose(det.patch_box, [cx - 8, cy - 8, 16, 16], atol=1e-9)
    assert np.allclose(det.box, det.patch_box, atol=1e-12)  # identity mapping
    assert det.confidence == pytest.approx(0.999)


def test_decode_uniform_map_tie_break_first_cell():
    gs = 4
    out = HeadOutput(cla=Tensor(np.full((1, gs, gs), 0.5)),
                     bbox=Tensor(np.full((4, gs, gs), 0.1)))
    det = decode(out, CropMapping(0.0, 0.0, 1.0), 32)
    assert det.peak == (0, 0)


def test_decode_maps_through_affine():
    gs = 4
    cla = np.full((1, gs, gs), 0.1)
    cla[0, 2, 1] = 0.9
    bbox = np.full((4, gs, gs), 0.125)
    out = HeadOutput(cla=Tensor(cla), bbox=Tensor(bbox))
    mapping = CropMapping(x0=10.0, y0=20.0, scale=2.0)
    det = decode(out, mapping, 32)
    assert np.allclose(det.box, mapping.patch_to_frame(det.patch_box), atol=1e-12)


def test_flagged_frame_classification_only():
    tracker = _tracker()
    rng = np.random.default_rng(6)
    res = tracker.forward(rng.uniform(0, 1, (48, 48, 8)),
                          [rng.uniform(0, 1, (96, 96, 8))] * 2, rho=1.0,
                          use_elimination=False)
    out = res.heads[-1]
    flagged = frame_loss(out, None, CFG.search_size)
    # equals the pure focal loss against an all-zero target map
    expected = focal_loss(out.cla, np.zeros((12, 12))).item()
    assert flagged.item() == pytest.approx(expected, abs=1e-12)


def test_frame_loss_grad_reaches_bbox_at_peak():
    tracker = _tracker()
    rng = np.random.default_rng(7)
    res = tracker.forward(rng.uniform(0, 1, (48, 48, 8)),
                          [rng.uniform(0, 1, (96, 96, 8))] * 2, rho=1.0,
                          use_elimination=False)
    loss = frame_loss(res.heads[-1], np.array([30.0, 40.0, 20.0, 16.0]), 96)
    loss.backward()
    g = tracker.params["head.reg.conv4.weight"].grad
    assert g is not None and np.abs(g).max() > 0
