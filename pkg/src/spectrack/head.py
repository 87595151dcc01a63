"""Dual-branch prediction head (confidence map + box regression), box
decoding, and the training losses (penalty-reduced focal, L1, GIoU)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import CropMapping
from .embed import TokenSet
from .numerics import ParamStore, Tensor, row_scatter, trunc_normal

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
LAMBDA_L1 = 5.0
LAMBDA_GIOU = 2.0

_P_CLIP = 1e-9


@dataclass
class HeadOutput:
    cla: Tensor     # (1, gs, gs), sigmoid confidences
    bbox: Tensor    # (4, gs, gs), exp-activated (l, t, r, b) / crop size


def init_head_params(store: ParamStore, cfg: ModelConfig,
                     rng: np.random.Generator, dtype=np.float64) -> None:
    C = cfg.channels
    store.add("head.placeholder", trunc_normal(rng, (C,), dtype=dtype))
    chans = [C, C // 2, C // 4, C // 8]
    for branch, out_c in (("cls", 1), ("reg", 4)):
        dims = chans + [out_c]
        for i in range(4):
            store.add(f"head.{branch}.conv{i + 1}.weight",
                      trunc_normal(rng, (dims[i + 1], dims[i], 3, 3), dtype=dtype))
            bias = np.zeros(dims[i + 1], dtype=dtype)
            if i == 3 and branch == "cls":
                bias[:] = -2.19      # start confidences near 0.1 (focal warmup)
            if i == 3 and branch == "reg":
                bias[:] = math.log(0.125)   # start box extents near 1/8 crop
            store.add(f"head.{branch}.conv{i + 1}.bias", bias)


def _branch(x: Tensor, store: ParamStore, branch: str) -> Tensor:
    for i in range(1, 5):
        w = store[f"head.{branch}.conv{i}.weight"]
        b = store[f"head.{branch}.conv{i}.bias"]
        x = x.conv2d(w, padding=1) + b.reshape(-1, 1, 1)
        if i < 4:
            x = x.gelu()
    return x


def head_forward(tokens: TokenSet, store: ParamStore, cfg: ModelConfig) -> list[HeadOutput]:
    """Scatter each frame's alive search rows back onto its grid (eliminated
    cells take the learned placeholder row) and run both conv stacks."""
    gs = tokens.grid
    outputs = []
    for frame in range(tokens.n_frames):
        rows = tokens.frame_rows(frame)
        alive_rows = rows[tokens.alive[rows]]
        cells = alive_rows - rows[0]
        feats = tokens.tokens.gather_rows(alive_rows)
        grid = row_scatter(feats, cells, gs * gs, store["head.placeholder"])
        fmap = grid.reshape(gs, gs, cfg.channels).transpose((2, 0, 1))
        cla = _branch(fmap, store, "cls").sigmoid()
        bbox = _branch(fmap, store, "reg").exp()
        outputs.append(HeadOutput(cla=cla, bbox=bbox))
    return outputs


@dataclass
class Detection:
    box: np.ndarray        # frame-space [x, y, w, h]
    confidence: float
    patch_box: np.ndarray  # crop-space [x, y, w, h]
    peak: tuple[int, int]


def decode(out: HeadOutput, mapping: CropMapping, crop_size: int) -> Detection:
    """Argmax cell of the confidence map (row-major tie break), box from the
    (l, t, r, b) distances there, mapped back to frame coordinates."""
    cla = out.cla.data[0]
    gs = cla.shape[0]
    flat = int(np.argmax(cla))
    i, j = divmod(flat, gs)
    stride = crop_size / gs
    cx = (j + 0.5) * stride
    cy = (i + 0.5) * stride
    l, t, r, b = out.bbox.data[:, i, j] * crop_size
    patch_box = np.array([cx - l, cy - t, l + r, t + b])
    return Detection(
        box=mapping.patch_to_frame(patch_box),
        confidence=float(cla[i, j]),
        patch_box=patch_box,
        peak=(i, j),
    )


# -- training targets and losses -------------------------------------------------


def gaussian_target(gs: int, center_cell: tuple[int, int], sigma: float) -> np.ndarray:
    """Penalty-reduction map: exactly one 1.0 at the center cell, Gaussian
    falloff (in cell units) elsewhere."""
    i0, j0 = center_cell
    ii, jj = np.mgrid[0:gs, 0:gs]
    d2 = (ii - i0) ** 2 + (jj - j0) ** 2
    y = np.exp(-d2 / (2.0 * sigma * sigma))
    y[i0, j0] = 1.0
    return y


def target_sigma(box_patch: np.ndarray, stride: float) -> float:
    diag_cells = math.hypot(box_patch[2], box_patch[3]) / stride
    return max(1.0, diag_cells / 12.0)


def focal_loss(cla: Tensor, target: np.ndarray,
               alpha: float = FOCAL_ALPHA, beta: float = FOCAL_BETA) -> Tensor:
    """Penalty-reduced focal loss over a confidence map.

    ``target`` holds exactly one 1.0 per visible target (all zeros for a
    fully-occluded frame); values in between reduce the negative penalty."""
    p_raw = cla.reshape(target.shape)
    if p_raw.data.min() <= 0.0 or p_raw.data.max() >= 1.0:
        raise ValueError("confidences must lie strictly inside (0, 1)")
    if target.min() < 0.0 or target.max() > 1.0:
        raise ValueError("target map must lie in [0, 1]")
    p = p_raw.clip(_P_CLIP, 1.0 - _P_CLIP)
    pos = (target == 1.0).astype(p.data.dtype)
    neg = 1.0 - pos
    pos_term = ((1.0 - p) ** alpha) * p.log() * pos
    neg_term = ((1.0 - target) ** beta) * (p ** alpha) * (1.0 - p).log() * neg
    n_pos = max(1.0, float(pos.sum()))
    return -(pos_term.sum() + neg_term.sum()) * (1.0 / n_pos)


def _corners(box):
    x, y, w, h = box[0], box[1], box[2], box[3]
    return x, y, x + w, y + h


def _giou_corners(px0, py0, px1, py1, gt: np.ndarray) -> Tensor:
    if gt[2] <= 0 or gt[3] <= 0:
        raise ValueError(f"degenerate ground-truth box {gt}")
    gx0, gy0, gx1, gy1 = _corners(gt.astype(np.float64))
    iw = px1.minimum(gx1) - px0.maximum(gx0)
    ih = py1.minimum(gy1) - py0.maximum(gy0)
    inter = iw.maximum(0.0) * ih.maximum(0.0)
    area_p = (px1 - px0) * (py1 - py0)
    union = area_p + float((gx1 - gx0) * (gy1 - gy0)) - inter
    iou = inter / union
    cw = px1.maximum(gx1) - px0.minimum(gx0)
    ch = py1.maximum(gy1) - py0.minimum(gy0)
    enclosing = cw * ch
    return iou - (enclosing - union) / enclosing


def giou(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Generalized IoU of two [x, y, w, h] boxes (differentiable in pred)."""
    px0, py0, px1, py1 = _corners([pred.gather_rows([i]).reshape(()) for i in range(4)])
    return _giou_corners(px0, py0, px1, py1, gt)


def giou_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    return 1.0 - giou(pred, gt)


def l1_loss(pred_ltrb: Tensor, gt_ltrb: np.ndarray) -> Tensor:
    return (pred_ltrb - gt_ltrb.astype(np.float64)).abs().mean()


def total_loss(cls_loss: Tensor, l1: Tensor | float, giou_l: Tensor | float,
               lambda_l1: float = LAMBDA_L1, lambda_giou: float = LAMBDA_GIOU) -> Tensor:
    return cls_loss + lambda_l1 * l1 + lambda_giou * giou_l


def frame_loss(out: HeadOutput, gt_box_patch: np.ndarray | None, crop_size: int,
               lambda_l1: float = LAMBDA_L1, lambda_giou: float = LAMBDA_GIOU) -> Tensor:
    """Loss for one search frame.  ``gt_box_patch`` is the crop-space box, or
    None for a flagged frame (classification against an all-zero map only)."""
    gs = out.cla.shape[-1]
    stride = crop_size / gs
    if gt_box_patch is None:
        return focal_loss(out.cla, np.zeros((gs, gs)))

    cx = gt_box_patch[0] + gt_box_patch[2] / 2.0
    cy = gt_box_patch[1] + gt_box_patch[3] / 2.0
    j0 = int(np.clip(math.floor(cx / stride), 0, gs - 1))
    i0 = int(np.clip(math.floor(cy / stride), 0, gs - 1))
    target = gaussian_target(gs, (i0, j0), target_sigma(gt_box_patch, stride))
    cls_l = focal_loss(out.cla, target)

    # regression supervised at the positive cell only
    cell_cx = (j0 + 0.5) * stride
    cell_cy = (i0 + 0.5) * stride
    gx0, gy0, gx1, gy1 = _corners(gt_box_patch)
    gt_ltrb = np.array([cell_cx - gx0, cell_cy - gy0, gx1 - cell_cx, gy1 - cell_cy])
    gt_ltrb = np.maximum(gt_ltrb, 1e-4) / crop_size
    pred_ltrb = out.bbox.reshape(4, gs * gs).swapaxes(0, 1).gather_rows([i0 * gs + j0]).reshape(4)
    l1 = l1_loss(pred_ltrb, gt_ltrb)

    scaled = pred_ltrb * float(crop_size)
    l_, t_, r_, b_ = (scaled.gather_rows([i]).reshape(()) for i in range(4))
    pred_box = [cell_cx - l_, cell_cy - t_, l_ + r_, t_ + b_]
    gl = giou_loss_from_parts(pred_box, np.array([gx0, gy0, gt_box_patch[2], gt_box_patch[3]]))
    return total_loss(cls_l, l1, gl, lambda_l1, lambda_giou)


def giou_loss_from_parts(pred_box: list, gt: np.ndarray) -> Tensor:
    """giou_loss where pred is given as four scalar tensors [x, y, w, h]."""
    px0, py0 = pred_box[0], pred_box[1]
    px1, py1 = pred_box[0] + pred_box[2], pred_box[1] + pred_box[3]
    return 1.0 - _giou_corners(px0, py0, px1, py1, gt)
