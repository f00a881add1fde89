"""Rotation self-supervision branch: the 4-way orientation classifier head,
box-guided feature selection (from ground-truth boxes at pretraining, from
detector pseudo-boxes at adaptation), and the rotation loss.
"""
from __future__ import annotations

import numpy as np

from . import boxgeom, diffcore
from .boxgeom import rotate_box, rotated_extents
from .diffcore import Tensor
from .errors import ContractViolation

POOLED = (4, 4)
DROPOUT_RATE = 0.5


def sample_rotation(rng: np.random.Generator) -> int:
    """Uniform quarter-turn label q in {1, 2, 3, 4}; q=4 is the identity."""
    return int(rng.integers(1, 5))


def whole_map_pool(fmap: Tensor, stride: int) -> Tensor:
    """Adaptive max pooling of the full feature map to the fixed grid,
    expressed as an ROI pool over the whole-image box."""
    _, fh, fw = fmap.shape
    return boxgeom.roi_pool(fmap, np.array([0.0, 0.0, fw * stride, fh * stride]), stride, POOLED)


def boxcrop(fmap_rotated: Tensor, boxes_rotated: np.ndarray, stride: int) -> list[Tensor]:
    """Pool one fixed-size feature patch per box from an already-rotated
    feature map; boxes must already be expressed in the rotated frame.

    Boxes that degenerate after mapping (no usable overlap with the map)
    are skipped; if every box is skipped an error is raised."""
    _, fh, fw = fmap_rotated.shape
    out: list[Tensor] = []
    for b in np.asarray(boxes_rotated, dtype=np.float64).reshape(-1, 4):
        clipped = boxgeom.clip_box(b, fw * stride, fh * stride)
        if clipped[2] - clipped[0] < 1.0 or clipped[3] - clipped[1] < 1.0:
            continue
        out.append(boxgeom.roi_pool(fmap_rotated, clipped, stride, POOLED))
    if not out:
        raise ContractViolation("boxcrop: no usable regions")
    return out


def pseudoboxcrop(
    fmaps: dict[int, Tensor],
    pseudo_boxes: np.ndarray,
    stride: int,
    img_w: int,
    img_h: int,
) -> dict[int, list[Tensor]] | None:
    """Recalibrate detector pseudo-boxes into each rotated frame and pool
    them from that rotation's feature map.

    `fmaps` maps rotation labels to the corresponding rotated feature maps;
    boxes are given in the original (unrotated) frame. Returns None when
    there are no usable boxes, signalling the caller to fall back to
    whole-image pooling."""
    boxes = np.asarray(pseudo_boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return None
    out: dict[int, list[Tensor]] = {}
    try:
        for q, fmap in fmaps.items():
            rotated = rotate_box(boxes, q, img_w, img_h)
            out[q] = boxcrop(fmap, rotated, stride)
    except ContractViolation:
        return None
    return out


def rotation_head_forward(
    pooled: Tensor | list[Tensor],
    theta_r: dict[str, Tensor],
    train: bool,
    rng: np.random.Generator,
) -> Tensor:
    """Pooled region feature(s) -> logits over the four orientations.

    Flatten, dropout (active only at train time), then a single FC layer.
    A list of pooled regions yields one logit row per region."""
    feat = theta_r["r.fc.w"].shape[1]
    if isinstance(pooled, Tensor):
        x = diffcore.reshape(pooled, (feat,))
    else:
        x = diffcore.stack_rows([diffcore.reshape(p, (feat,)) for p in pooled])
    x = diffcore.dropout(x, DROPOUT_RATE, rng, train)
    return diffcore.linear(x, theta_r["r.fc.w"], theta_r["r.fc.b"])


def rotation_loss(logits: Tensor, q) -> Tensor:
    """Cross-entropy against the orientation label(s); the classifier target
    for rotation q is q-1. Multiple regions are averaged."""
    if logits.data.ndim == 1:
        qi = int(q)
        if qi not in boxgeom.ROTATIONS:
            raise ContractViolation(f"rotation_loss: q must be in {boxgeom.ROTATIONS}, got {qi}")
        return diffcore.softmax_cross_entropy(logits, qi - 1)
    qs = np.asarray(q, dtype=np.int64).reshape(-1)
    if qs.size == 1:
        qs = np.full(logits.shape[0], qs[0])
    if np.any(qs < 1) or np.any(qs > 4):
        raise ContractViolation("rotation_loss: labels must be in {1,2,3,4}")
    return diffcore.cross_entropy_rows(logits, qs - 1)


def rotation_accuracy(
    images: list[np.ndarray],
    boxes_per_image: list[np.ndarray],
    params,
    stride: int,
    seed: int = 0,
) -> float:
    """Fraction of correctly classified orientations over one random
    rotation per image, pooling from the given (ground-truth) boxes."""
    from . import minidet

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x707ACC)))
    hits = 0
    total = 0
    for img, boxes in zip(images, boxes_per_image):
        q = sample_rotation(rng)
        _, h, w = img.shape
        with diffcore.pause_recording():
            fmap_r = minidet.backbone_forward(Tensor(boxgeom.rotate_image(img, q)), params.theta_f)
            if len(boxes):
                pooled = boxcrop(fmap_r, rotate_box(np.asarray(boxes), q, w, h), stride)
            else:
                pooled = [whole_map_pool(fmap_r, stride)]
            logits = rotation_head_forward(pooled, params.theta_r, train=False, rng=rng)
        rows = logits.data if logits.data.ndim == 2 else logits.data[None, :]
        hits += int((rows.argmax(axis=1) == q - 1).sum())
        total += rows.shape[0]
    return hits / max(total, 1)
