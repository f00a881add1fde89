"""Miniature two-stage detector: convolutional backbone, region proposal
head, ROI classification head, the combined detection loss, and inference.

The backbone is a plain 4-block CNN with total stride 8 (channels
16 -> 32 -> 64 -> 64, two 3x3 convs per block, 2x2 max-pool after the
first three blocks). Parameters live in three named groups: "f.*" backbone,
"d.*" proposal + ROI heads, "r.*" rotation classifier head.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import boxgeom, diffcore
from .boxgeom import AnchorGrid, Detection
from .diffcore import Graph, Tensor, pause_recording
from .errors import ContractViolation

STRIDE = 8
ANCHOR_SCALES = (16.0, 32.0, 64.0)
ANCHOR_RATIOS = (1.0, 0.5, 2.0)
ANCHORS_PER_CELL = len(ANCHOR_SCALES) * len(ANCHOR_RATIOS)
NUM_CLASSES = 5
FMAP_CHANNELS = 64
ROI_POOL = (4, 4)
ROI_FEAT = FMAP_CHANNELS * ROI_POOL[0] * ROI_POOL[1]
ROI_HIDDEN = 256

RPN_NMS_THRESH = 0.7
RPN_TOP_N = 50
RPN_PRE_NMS_TOP_N = 300
RPN_BATCH = 32
RPN_POS_THRESH = 0.7
RPN_NEG_THRESH = 0.3
ROI_FG_THRESH = 0.5
DELTA_CLAMP = 4.0  # exp(4) ~ 55x the anchor extent; guards decode overflow

BACKBONE_CHANNELS = ((3, 16), (16, 32), (32, 64), (64, 64))


@dataclass
class ModelParams:
    """The three parameter groups of the multi-task detector."""

    theta_f: dict[str, Tensor]
    theta_d: dict[str, Tensor]
    theta_r: dict[str, Tensor]
    num_classes: int = NUM_CLASSES

    def all_params(self) -> dict[str, Tensor]:
        merged: dict[str, Tensor] = {}
        merged.update(self.theta_f)
        merged.update(self.theta_d)
        merged.update(self.theta_r)
        return merged

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.theta_f.items()},
            {k: v.copy() for k, v in self.theta_d.items()},
            {k: v.copy() for k, v in self.theta_r.items()},
            self.num_classes,
        )

    def group_hash(self, group: str) -> int:
        d = {"f": self.theta_f, "d": self.theta_d, "r": self.theta_r}[group]
        h = 0
        for name in sorted(d):
            h = hash((h, name, d[name].data.tobytes()))
        return h

    def check_finite(self) -> None:
        for name, t in self.all_params().items():
            if not np.isfinite(t.data).all():
                raise ContractViolation(f"parameter '{name}' contains NaN/Inf")


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int, std: float | None = None):
    fan_in = cin * k * k
    s = std if std is not None else np.sqrt(2.0 / fan_in)
    w = Tensor(rng.normal(0.0, s, size=(cout, cin, k, k)).astype(np.float32), requires_grad=True)
    b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
    return w, b


def _fc_init(rng: np.random.Generator, cout: int, cin: int, std: float | None = None):
    s = std if std is not None else np.sqrt(2.0 / cin)
    w = Tensor(rng.normal(0.0, s, size=(cout, cin)).astype(np.float32), requires_grad=True)
    b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
    return w, b


def init_params(seed: int, num_classes: int = NUM_CLASSES) -> ModelParams:
    """Deterministically initialize all three parameter groups."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD37EC7)))
    theta_f: dict[str, Tensor] = {}
    for bi, (cin, cout) in enumerate(BACKBONE_CHANNELS, start=1):
        w1, b1 = _conv_init(rng, cout, cin, 3)
        w2, b2 = _conv_init(rng, cout, cout, 3)
        theta_f[f"f.b{bi}.c1.w"] = w1
        theta_f[f"f.b{bi}.c1.b"] = b1
        theta_f[f"f.b{bi}.c2.w"] = w2
        theta_f[f"f.b{bi}.c2.b"] = b2

    theta_d: dict[str, Tensor] = {}
    w, b = _conv_init(rng, FMAP_CHANNELS, FMAP_CHANNELS, 3)
    theta_d["d.rpn.conv.w"] = w
    theta_d["d.rpn.conv.b"] = b
    w, b = _conv_init(rng, 2 * ANCHORS_PER_CELL, FMAP_CHANNELS, 1, std=0.01)
    theta_d["d.rpn.obj.w"] = w
    theta_d["d.rpn.obj.b"] = b
    w, b = _conv_init(rng, 4 * ANCHORS_PER_CELL, FMAP_CHANNELS, 1, std=0.01)
    theta_d["d.rpn.delta.w"] = w
    theta_d["d.rpn.delta.b"] = b
    w, b = _fc_init(rng, ROI_HIDDEN, ROI_FEAT)
    theta_d["d.roi.fc1.w"] = w
    theta_d["d.roi.fc1.b"] = b
    w, b = _fc_init(rng, ROI_HIDDEN, ROI_HIDDEN)
    theta_d["d.roi.fc2.w"] = w
    theta_d["d.roi.fc2.b"] = b
    w, b = _fc_init(rng, num_classes + 1, ROI_HIDDEN, std=0.01)
    theta_d["d.roi.cls.w"] = w
    theta_d["d.roi.cls.b"] = b
    w, b = _fc_init(rng, 4, ROI_HIDDEN, std=0.001)
    theta_d["d.roi.reg.w"] = w
    theta_d["d.roi.reg.b"] = b

    theta_r: dict[str, Tensor] = {}
    w, b = _fc_init(rng, 4, ROI_FEAT, std=0.01)
    theta_r["r.fc.w"] = w
    theta_r["r.fc.b"] = b
    return ModelParams(theta_f, theta_d, theta_r, num_classes)


# ---------------------------------------------------------------------------
# Forward passes


def backbone_forward(
    img: Tensor, theta_f: dict[str, Tensor], freeze_blocks: int = 0
) -> Tensor:
    """CHW image -> (64, H/8, W/8) feature map.

    The first `freeze_blocks` blocks run without graph recording, so
    backward stops at their boundary and their weights receive no gradient.
    """
    _, h, w = img.shape
    if h % 8 != 0 or w % 8 != 0:
        raise ContractViolation(f"backbone_forward: extents {h}x{w} not divisible by 8")

    def block(x: Tensor, bi: int) -> Tensor:
        x = diffcore.relu(diffcore.conv2d(x, theta_f[f"f.b{bi}.c1.w"], theta_f[f"f.b{bi}.c1.b"], pad=1))
        x = diffcore.relu(diffcore.conv2d(x, theta_f[f"f.b{bi}.c2.w"], theta_f[f"f.b{bi}.c2.b"], pad=1))
        if bi < 4:
            x = diffcore.max_pool2d(x, 2, 2)
        return x

    # Center pixel values; keeps feature magnitudes (and therefore the
    # effective step size of the linear heads) in a trainable range.
    x = diffcore.add(img, Tensor(np.full(img.shape, -0.5, dtype=img.data.dtype)))
    for bi in range(1, 5):
        if bi <= freeze_blocks:
            with pause_recording():
                x = block(x, bi)
        else:
            x = block(x, bi)
    return x


def _anchor_rows(x: Tensor, per_anchor: int) -> Tensor:
    """(A*k, H, W) head output -> (H*W*A, k) rows in anchor listing order."""
    ak, h, w = x.shape
    a = ak // per_anchor
    out = Tensor(
        np.ascontiguousarray(
            x.data.reshape(a, per_anchor, h, w).transpose(2, 3, 0, 1)
        ).reshape(h * w * a, per_anchor)
    )

    def backward_fn(gout: np.ndarray):
        g = gout.reshape(h, w, a, per_anchor).transpose(2, 3, 0, 1).reshape(ak, h, w)
        return (np.ascontiguousarray(g),)

    return diffcore.record((x,), out, backward_fn)


def anchors_for(fmap_h: int, fmap_w: int) -> AnchorGrid:
    return boxgeom.gen_anchors(fmap_h, fmap_w, STRIDE, ANCHOR_SCALES, ANCHOR_RATIOS)


def rpn_forward(
    fmap: Tensor,
    theta_d: dict[str, Tensor],
    img_w: int,
    img_h: int,
    top_n: int = RPN_TOP_N,
) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    """Returns (objectness logits (N,2), deltas (N,4), proposal boxes (P,4),
    proposal scores (P,)); proposals are NMS-filtered decoded anchors,
    sorted by objectness."""
    _, fh, fw = fmap.shape
    shared = diffcore.relu(
        diffcore.conv2d(fmap, theta_d["d.rpn.conv.w"], theta_d["d.rpn.conv.b"], pad=1)
    )
    obj = _anchor_rows(
        diffcore.conv2d(shared, theta_d["d.rpn.obj.w"], theta_d["d.rpn.obj.b"]), 2
    )
    deltas = _anchor_rows(
        diffcore.conv2d(shared, theta_d["d.rpn.delta.w"], theta_d["d.rpn.delta.b"]), 4
    )
    anchors = anchors_for(fh, fw)
    scores = diffcore.softmax(obj.data, axis=1)[:, 1]
    # Decode only the top-scoring anchors; stable sort keeps anchor index
    # order under ties.
    top = np.argsort(-scores, kind="stable")[:RPN_PRE_NMS_TOP_N]
    d = np.clip(deltas.data[top].astype(np.float64), -DELTA_CLAMP, DELTA_CLAMP)
    boxes = boxgeom.clip_box(boxgeom.decode_deltas(d, anchors.boxes[top]), img_w, img_h)
    ok = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3)
    idx = np.where(ok)[0]
    keep = boxgeom.nms_indices(boxes[idx], scores[top][idx], RPN_NMS_THRESH, max_keep=top_n)
    sel = idx[keep]
    return obj, deltas, boxes[sel], scores[top][sel]


def roi_head_forward(
    fmap: Tensor, proposals: np.ndarray, theta_d: dict[str, Tensor]
) -> tuple[Tensor, Tensor]:
    """Per-proposal class logits over K+1 (background last) and 4 box deltas."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if proposals.shape[0] == 0:
        empty = Tensor(np.zeros((0, 1), dtype=fmap.dtype))
        return empty, empty
    pooled = [
        diffcore.reshape(boxgeom.roi_pool(fmap, p, STRIDE, ROI_POOL), (ROI_FEAT,))
        for p in proposals
    ]
    x = diffcore.stack_rows(pooled)
    x = diffcore.relu(diffcore.linear(x, theta_d["d.roi.fc1.w"], theta_d["d.roi.fc1.b"]))
    x = diffcore.relu(diffcore.linear(x, theta_d["d.roi.fc2.w"], theta_d["d.roi.fc2.b"]))
    cls_logits = diffcore.linear(x, theta_d["d.roi.cls.w"], theta_d["d.roi.cls.b"])
    reg = diffcore.linear(x, theta_d["d.roi.reg.w"], theta_d["d.roi.reg.b"])
    return cls_logits, reg


# ---------------------------------------------------------------------------
# Training loss


def _sample_rpn_minibatch(
    targets: boxgeom.AnchorTargets, rng: np.random.Generator, batch: int = RPN_BATCH
) -> tuple[np.ndarray, np.ndarray]:
    """Sample anchor indices and their 0/1 labels, at most 50% foreground."""
    fg = targets.foreground
    bg = targets.background
    n_fg = min(len(fg), batch // 2)
    if len(fg) > n_fg:
        fg = fg[rng.permutation(len(fg))[:n_fg]]
    n_bg = min(len(bg), batch - n_fg)
    if len(bg) > n_bg:
        bg = bg[rng.permutation(len(bg))[:n_bg]]
    sel = np.concatenate([fg, bg])
    labels = np.concatenate([np.ones(len(fg), np.int64), np.zeros(len(bg), np.int64)])
    return sel, labels


def detection_loss(
    img: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    params: ModelParams,
    rng: np.random.Generator,
    fmap: Tensor | None = None,
    rois: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Two-stage detection loss: (cls + regr) for the proposal head plus
    (cls + regr) for the ROI head, each term normalized by its own sample
    count. Must run inside an active Graph to train.

    `rois` fixes the ROI set explicitly (proposal boxes are constants of
    the loss, so gradient checking must hold them still); by default they
    are the current proposals plus the gt boxes."""
    _, h, w = img.shape
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if fmap is None:
        fmap = backbone_forward(Tensor(img), params.theta_f)
    obj, deltas, proposals, _ = rpn_forward(fmap, params.theta_d, w, h)

    anchors = anchors_for(fmap.shape[1], fmap.shape[2])
    targets = boxgeom.assign_anchor_targets(
        anchors.boxes, gt_boxes, RPN_POS_THRESH, RPN_NEG_THRESH
    )
    sel, labels = _sample_rpn_minibatch(targets, rng)
    rpn_cls = diffcore.cross_entropy_rows(diffcore.take_rows(obj, sel), labels)
    fg_sel = sel[labels == 1]
    if len(fg_sel) > 0:
        t = Tensor(targets.deltas[fg_sel].astype(img.dtype))
        rpn_reg = diffcore.scale(
            diffcore.smooth_l1(diffcore.take_rows(deltas, fg_sel), t), 1.0 / len(fg_sel)
        )
    else:
        rpn_reg = Tensor(np.asarray(0.0, dtype=img.dtype))

    # ROI stage: match proposals (plus gt boxes, training-time convention)
    # against ground truth at IoU 0.5.
    if rois is None:
        rois = (
            np.concatenate([proposals, gt_boxes], axis=0)
            if gt_boxes.shape[0] > 0
            else proposals
        )
    if gt_boxes.shape[0] > 0:
        ious = boxgeom.pairwise_iou(rois, gt_boxes)
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(len(rois)), best_gt]
        roi_labels = np.where(
            best_iou >= ROI_FG_THRESH, gt_classes[best_gt], params.num_classes
        )
    else:
        roi_labels = np.full(len(rois), params.num_classes, dtype=np.int64)
        best_gt = np.zeros(len(rois), dtype=np.int64)

    cls_logits, reg = roi_head_forward(fmap, rois, params.theta_d)
    roi_cls = diffcore.cross_entropy_rows(cls_logits, roi_labels)
    fg_rois = np.where(roi_labels < params.num_classes)[0]
    if len(fg_rois) > 0:
        enc = boxgeom.encode_deltas(gt_boxes[best_gt[fg_rois]], rois[fg_rois])
        roi_reg = diffcore.scale(
            diffcore.smooth_l1(
                diffcore.take_rows(reg, fg_rois), Tensor(enc.astype(img.dtype))
            ),
            1.0 / len(fg_rois),
        )
    else:
        roi_reg = Tensor(np.asarray(0.0, dtype=img.dtype))

    total = diffcore.add(diffcore.add(rpn_cls, rpn_reg), diffcore.add(roi_cls, roi_reg))
    breakdown = {
        "rpn_cls": rpn_cls.item(),
        "rpn_reg": rpn_reg.item(),
        "roi_cls": roi_cls.item(),
        "roi_reg": roi_reg.item(),
    }
    return total, breakdown


# ---------------------------------------------------------------------------
# Inference


def detect(
    img: np.ndarray,
    params: ModelParams,
    score_thresh: float = 0.5,
    nms_thresh: float = 0.3,
    max_dets: int = 20,
) -> list[Detection]:
    """Full two-stage inference; returns detections sorted by score."""
    _, h, w = img.shape
    with pause_recording():
        fmap = backbone_forward(Tensor(img), params.theta_f)
    return detect_from_fmap(fmap, params, w, h, score_thresh, nms_thresh, max_dets)


def detect_from_fmap(
    fmap: Tensor,
    params: ModelParams,
    img_w: int,
    img_h: int,
    score_thresh: float = 0.5,
    nms_thresh: float = 0.3,
    max_dets: int = 20,
) -> list[Detection]:
    """Proposal + ROI stages on a precomputed feature map (no gradients)."""
    w, h = img_w, img_h
    with pause_recording():
        fmap = Tensor(fmap.data)  # detached view of the same buffer
        _, _, proposals, _ = rpn_forward(fmap, params.theta_d, w, h)
        if proposals.shape[0] == 0:
            return []
        cls_logits, reg = roi_head_forward(fmap, proposals, params.theta_d)
    probs = diffcore.softmax(cls_logits.data, axis=1)
    d = np.clip(reg.data.astype(np.float64), -DELTA_CLAMP, DELTA_CLAMP)
    refined = boxgeom.clip_box(boxgeom.decode_deltas(d, proposals), w, h)
    valid = (refined[:, 2] - refined[:, 0] > 1e-3) & (refined[:, 3] - refined[:, 1] > 1e-3)
    dets: list[Detection] = []
    for c in range(params.num_classes):
        sc = probs[:, c]
        keep = np.where((sc >= score_thresh) & valid)[0]
        if len(keep) == 0:
            continue
        kept = boxgeom.nms_indices(refined[keep], sc[keep], nms_thresh)
        for i in keep[kept]:
            dets.append(Detection(c, float(sc[i]), refined[i].copy()))
    dets.sort(key=lambda det: -det.score)
    return dets[:max_dets]


# ---------------------------------------------------------------------------
# Checkpoint I/O

CHECKPOINT_MAGIC = b"OSH1"


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary format: magic, u32 LE tensor count, then per tensor (sorted by
    name): u16 name length + UTF-8 name, u8 dtype tag (0 = f32), u8 rank,
    rank x u32 extents, row-major f32 LE payload."""
    tensors = params.all_params()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            t = tensors[name]
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<BB", 0, t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, num_classes: int = NUM_CLASSES) -> ModelParams:
    groups: dict[str, dict[str, Tensor]] = {"f": {}, "d": {}, "r": {}}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation(f"checkpoint {path}: bad magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            dtype_tag, rank = struct.unpack("<BB", fh.read(2))
            if dtype_tag != 0:
                raise ContractViolation(f"checkpoint {path}: unknown dtype tag {dtype_tag}")
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ContractViolation(f"checkpoint {path}: truncated payload for '{name}'")
            data = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            prefix = name.split(".", 1)[0]
            if prefix not in groups:
                raise ContractViolation(f"checkpoint {path}: unknown group prefix in '{name}'")
            groups[prefix][name] = Tensor(data, requires_grad=True)
    params = ModelParams(groups["f"], groups["d"], groups["r"], num_classes)
    cls_w = params.theta_d.get("d.roi.cls.w")
    if cls_w is not None:
        params.num_classes = cls_w.shape[0] - 1
    return params
