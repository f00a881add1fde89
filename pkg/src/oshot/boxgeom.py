"""Box algebra, right-angle rotation geometry, anchors, target assignment,
NMS, and differentiable ROI pooling.

Boxes are ``(x1, y1, x2, y2)`` float arrays in pixel coordinates with the
origin at the top-left corner, x rightward, y downward, and x1 < x2,
y1 < y2. Rotations are quarter-turn labels q in {1, 2, 3, 4}: q*90 degrees
counter-clockwise in the (x, y-up) sense, with q=4 the identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore
from .diffcore import Tensor
from .errors import ContractViolation

ROTATIONS = (1, 2, 3, 4)


@dataclass
class Detection:
    cls: int
    score: float
    box: np.ndarray  # (4,) x1,y1,x2,y2 in image coordinates


@dataclass
class AnchorGrid:
    """All anchors for one feature map, row-major cells, per-cell
    (scale, ratio) combinations in listing order."""

    boxes: np.ndarray  # (N, 4)
    fmap_h: int
    fmap_w: int
    stride: int
    scales: tuple[float, ...]
    ratios: tuple[float, ...]

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass
class AnchorTargets:
    labels: np.ndarray  # (N,) int8: 1 foreground, 0 background, -1 ignore
    deltas: np.ndarray  # (N, 4) regression targets, valid where labels == 1

    @property
    def foreground(self) -> np.ndarray:
        return np.where(self.labels == 1)[0]

    @property
    def background(self) -> np.ndarray:
        return np.where(self.labels == 0)[0]


def _check_box(b: np.ndarray, name: str = "box") -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape[-1] != 4:
        raise ContractViolation(f"{name}: expected 4 coordinates, got shape {b.shape}")
    if np.any(b[..., 2] <= b[..., 0]) or np.any(b[..., 3] <= b[..., 1]):
        raise ContractViolation(f"{name}: requires x1 < x2 and y1 < y2, got {b}")
    return b


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    a = _check_box(a, "a")
    b = _check_box(b, "b")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (N,4) and (M,4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def rotate_image(img: np.ndarray, q: int) -> np.ndarray:
    """Rotate a CHW image by q*90 degrees; q=4 returns the input unchanged.

    For q=1 the pixel at (x, y) lands at (y, W-1-x), so the top-right
    corner becomes the new origin.
    """
    if q not in ROTATIONS:
        raise ContractViolation(f"rotate_image: q must be in {ROTATIONS}, got {q}")
    if q == 4:
        return img
    return np.ascontiguousarray(np.rot90(img, k=q, axes=(1, 2)))


def rotate_box(box: np.ndarray, q: int, w: float, h: float) -> np.ndarray:
    """Map a box from a WxH frame into the frame rotated by q*90 degrees.

    q=1 sends the point (x, y) to (y, W-x) in continuous coordinates;
    higher q values compose that map. Also accepts an (N,4) array.
    """
    if q not in ROTATIONS:
        raise ContractViolation(f"rotate_box: q must be in {ROTATIONS}, got {q}")
    b = np.asarray(box, dtype=np.float64)
    single = b.ndim == 1
    b = b.reshape(-1, 4).copy()
    x1, y1, x2, y2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    if q == 1:
        out = np.stack([y1, w - x2, y2, w - x1], axis=1)
    elif q == 2:
        out = np.stack([w - x2, h - y2, w - x1, h - y1], axis=1)
    elif q == 3:
        out = np.stack([h - y2, x1, h - y1, x2], axis=1)
    else:
        out = b
    return out[0] if single else out


def rotated_extents(q: int, w: float, h: float) -> tuple[float, float]:
    """(W', H') of a WxH frame after rotation q."""
    return (h, w) if q in (1, 3) else (w, h)


def clip_box(box: np.ndarray, w: float, h: float) -> np.ndarray:
    """Clip box coordinates to the image extents (may yield a degenerate box)."""
    b = np.asarray(box, dtype=np.float64).copy()
    b[..., 0::2] = np.clip(b[..., 0::2], 0.0, w)
    b[..., 1::2] = np.clip(b[..., 1::2], 0.0, h)
    return b


def nms_indices(
    boxes: np.ndarray, scores: np.ndarray, iou_thresh: float, max_keep: int | None = None
) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order, ties
    broken by earlier index. Stops early once `max_keep` boxes survive."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[1:]
        ix = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        iy = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        np.maximum(ix, 0.0, out=ix)
        np.maximum(iy, 0.0, out=iy)
        inter = ix * iy
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy NMS over Detection objects."""
    if not dets:
        return []
    boxes = np.stack([d.box for d in dets])
    scores = np.asarray([d.score for d in dets])
    keep = nms_indices(boxes, scores, iou_thresh)
    return [dets[i] for i in keep]


def gen_anchors(
    fmap_h: int,
    fmap_w: int,
    stride: int,
    scales: tuple[float, ...],
    ratios: tuple[float, ...],
) -> AnchorGrid:
    """One anchor per (cell, scale, ratio); centers on the stride grid at
    (j*stride + stride/2, i*stride + stride/2)."""
    if stride < 1:
        raise ContractViolation(f"gen_anchors: stride must be >= 1, got {stride}")
    cy, cx = np.meshgrid(
        np.arange(fmap_h) * stride + stride / 2.0,
        np.arange(fmap_w) * stride + stride / 2.0,
        indexing="ij",
    )
    combos = [(s, r) for s in scales for r in ratios]
    ws = np.array([s * np.sqrt(r) for s, r in combos])
    hs = np.array([s / np.sqrt(r) for s, r in combos])
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    boxes = np.stack(
        [
            cx - ws / 2.0,
            cy - hs / 2.0,
            cx + ws / 2.0,
            cy + hs / 2.0,
        ],
        axis=2,
    ).reshape(-1, 4)
    return AnchorGrid(boxes, fmap_h, fmap_w, stride, tuple(scales), tuple(ratios))


def encode_deltas(gt: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Box regression parameterization (tx, ty, tw, th) of gt w.r.t. anchor."""
    gt = np.asarray(gt, dtype=np.float64)
    single = gt.ndim == 1
    gt = gt.reshape(-1, 4)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1, 4)
    wa = anchor[:, 2] - anchor[:, 0]
    ha = anchor[:, 3] - anchor[:, 1]
    wg = gt[:, 2] - gt[:, 0]
    hg = gt[:, 3] - gt[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0) or np.any(wg <= 0) or np.any(hg <= 0):
        raise ContractViolation("encode_deltas: boxes must have positive extents")
    cxa = anchor[:, 0] + wa / 2.0
    cya = anchor[:, 1] + ha / 2.0
    cxg = gt[:, 0] + wg / 2.0
    cyg = gt[:, 1] + hg / 2.0
    t = np.stack(
        [(cxg - cxa) / wa, (cyg - cya) / ha, np.log(wg / wa), np.log(hg / ha)], axis=1
    )
    return t[0] if single else t


def decode_deltas(deltas: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Exact inverse of encode_deltas."""
    d = np.asarray(deltas, dtype=np.float64)
    single = d.ndim == 1
    d = d.reshape(-1, 4)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1, 4)
    wa = anchor[:, 2] - anchor[:, 0]
    ha = anchor[:, 3] - anchor[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0):
        raise ContractViolation("decode_deltas: anchors must have positive extents")
    cxa = anchor[:, 0] + wa / 2.0
    cya = anchor[:, 1] + ha / 2.0
    cx = d[:, 0] * wa + cxa
    cy = d[:, 1] * ha + cya
    w = np.exp(d[:, 2]) * wa
    h = np.exp(d[:, 3]) * ha
    out = np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)
    return out[0] if single else out


def assign_anchor_targets(
    anchors: np.ndarray,
    gts: np.ndarray,
    pos_thr: float,
    neg_thr: float,
) -> AnchorTargets:
    """Label anchors foreground/background/ignore against ground-truth boxes.

    Foreground when best-gt IoU >= pos_thr, background when <= neg_thr,
    ignore in between; every gt additionally claims its single best anchor
    so no object goes uncovered.
    """
    if pos_thr <= neg_thr:
        raise ContractViolation(
            f"assign_anchor_targets: pos_thr {pos_thr} must exceed neg_thr {neg_thr}"
        )
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = anchors.shape[0]
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    labels = np.full(n, -1, dtype=np.int8)
    deltas = np.zeros((n, 4), dtype=np.float64)
    if gts.shape[0] == 0:
        labels[:] = 0
        return AnchorTargets(labels, deltas)
    ious = pairwise_iou(anchors, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou <= neg_thr] = 0
    labels[best_iou >= pos_thr] = 1
    # Coverage guarantee: each gt's single best anchor is foreground.
    labels[ious.argmax(axis=0)] = 1
    fg = labels == 1
    if fg.any():
        deltas[fg] = encode_deltas(gts[best_gt[fg]], anchors[fg])
    return AnchorTargets(labels, deltas)


def _feature_window(
    box: np.ndarray, stride: int, fh: int, fw: int
) -> tuple[int, int, int, int]:
    """Map an image-coordinate box to a non-empty integer feature window."""
    b = clip_box(np.asarray(box, dtype=np.float64), fw * stride, fh * stride)
    x1 = int(np.floor(b[0] / stride))
    y1 = int(np.floor(b[1] / stride))
    x2 = int(np.ceil(b[2] / stride))
    y2 = int(np.ceil(b[3] / stride))
    x1 = max(0, min(x1, fw - 1))
    y1 = max(0, min(y1, fh - 1))
    x2 = max(x1 + 1, min(x2, fw))
    y2 = max(y1 + 1, min(y2, fh))
    return x1, y1, x2, y2


_BIN_CACHE: dict[tuple[int, int, int, int], tuple[np.ndarray, np.ndarray]] = {}


def _bin_gather(wh: int, ww: int, ph: int, pw: int) -> tuple[np.ndarray, np.ndarray]:
    """Padded gather indices of each pooling bin's cells within a window,
    plus the padding mask. Cached: window shapes repeat constantly."""
    key = (wh, ww, ph, pw)
    cached = _BIN_CACHE.get(key)
    if cached is not None:
        return cached
    cells = []
    for i in range(ph):
        y0 = (i * wh) // ph
        y1 = max(-((-(i + 1) * wh) // ph), y0 + 1)  # ceil division
        for j in range(pw):
            x0 = (j * ww) // pw
            x1 = max(-((-(j + 1) * ww) // pw), x0 + 1)
            ys, xs = np.mgrid[y0:y1, x0:x1]
            cells.append((ys * ww + xs).ravel())
    longest = max(len(c) for c in cells)
    idx = np.zeros((len(cells), longest), dtype=np.int64)
    mask = np.ones((len(cells), longest), dtype=bool)
    for r, c in enumerate(cells):
        idx[r, : len(c)] = c
        mask[r, : len(c)] = False
    _BIN_CACHE[key] = (idx, mask)
    return idx, mask


def roi_pool(
    fmap: Tensor, box: np.ndarray, stride: int, out: tuple[int, int] = (4, 4)
) -> Tensor:
    """Max-pool the feature-map region under an image-coordinate box into a
    fixed (C, ph, pw) grid. Differentiable w.r.t. fmap."""
    c, fh, fw = fmap.shape
    b = np.asarray(box, dtype=np.float64)
    if b[2] <= 0 or b[3] <= 0 or b[0] >= fw * stride or b[1] >= fh * stride:
        raise ContractViolation(f"roi_pool: box {b} lies outside the feature map")
    ph, pw = out
    x1, y1, x2, y2 = _feature_window(b, stride, fh, fw)
    wh = y2 - y1
    ww = x2 - x1
    data = fmap.data
    win = np.ascontiguousarray(data[:, y1:y2, x1:x2]).reshape(c, -1)
    idx, mask = _bin_gather(wh, ww, ph, pw)
    gathered = win[:, idx]  # (c, ph*pw, L)
    if mask.any():
        gathered = np.where(mask, -np.inf, gathered)
    am = gathered.argmax(axis=2)
    pooled = np.take_along_axis(gathered, am[..., None], axis=2)[..., 0]
    out_t = Tensor(pooled.reshape(c, ph, pw).astype(fmap.dtype, copy=False))
    cell = idx[np.arange(idx.shape[0])[None, :], am]  # (c, ph*pw) window cells
    rows = y1 + cell // ww
    cols = x1 + cell % ww

    def backward_fn(gout: np.ndarray):
        gf = np.zeros_like(data)
        ci = np.repeat(np.arange(c), ph * pw).reshape(c, ph * pw)
        np.add.at(gf, (ci, rows, cols), gout.reshape(c, ph * pw))
        return (gf,)

    return diffcore.record((fmap,), out_t, backward_fn)
