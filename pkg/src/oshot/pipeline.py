"""Two-phase pipeline: multi-task pretraining of the detector with the
rotation head, then per-test-image adaptation of the backbone via the
rotation task with cross-task pseudo-labeling.

Each test image is processed from a fresh snapshot of the pretrained
parameters; adaptation never touches the proposal/ROI heads.
"""
from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass, field, replace

import numpy as np

from . import boxgeom, diffcore, evalkit, minidet, rotsup, scenes
from .boxgeom import Detection
from .diffcore import Graph, OptimizerState, Tensor
from .errors import ContractViolation
from .minidet import ModelParams

_PRETRAIN_TAG = 0x05E7
_ADAPT_TAG = 0xADA7


@dataclass
class PretrainConfig:
    steps: int = 6000
    lr: float = 0.001
    momentum: float = 0.9
    lam: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_frac: float = 5.0 / 7.0
    rotation_input: str = "boxcrop"  # "image" | "boxcrop"
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0:
            raise ContractViolation(f"PretrainConfig: steps must be > 0, got {self.steps}")
        if self.lam < 0:
            raise ContractViolation(f"PretrainConfig: lambda must be >= 0, got {self.lam}")
        if self.rotation_input not in ("image", "boxcrop"):
            raise ContractViolation(
                f"PretrainConfig: rotation_input must be image|boxcrop, got {self.rotation_input!r}"
            )


@dataclass
class AdaptConfig:
    gamma: int = 30
    lam: float = 0.2
    lr: float = 0.001
    momentum: float = 0.9
    rotation_input: str = "pseudobox"  # "image" | "pseudobox"
    pseudo_score_thresh: float = 0.5
    max_pseudo_boxes: int = 8
    rotations_per_iter: int = 1
    freeze_blocks: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractViolation(f"AdaptConfig: gamma must be >= 0, got {self.gamma}")
        if self.rotation_input not in ("image", "pseudobox"):
            raise ContractViolation(
                f"AdaptConfig: rotation_input must be image|pseudobox, got {self.rotation_input!r}"
            )
        if self.rotations_per_iter not in (1, 4):
            raise ContractViolation(
                f"AdaptConfig: rotations_per_iter must be 1 or 4, got {self.rotations_per_iter}"
            )
        if not 0 <= self.freeze_blocks <= 4:
            raise ContractViolation(
                f"AdaptConfig: freeze_blocks must be in [0,4], got {self.freeze_blocks}"
            )


@dataclass
class EvalConfig:
    score_thresh: float = 0.5
    nms_thresh: float = 0.3
    iou_thresh: float = 0.5
    top_k: int | None = None  # defaults to the number of target images
    jobs: int = 1


def derive_seed(seed: int, index: int, tag: int = _ADAPT_TAG) -> int:
    """Stable per-sample sub-seed; independent of processing order."""
    ss = np.random.SeedSequence((seed, index, tag))
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Pretraining


def _rotation_branch_loss(
    img: np.ndarray,
    qs: list[int],
    boxes: np.ndarray | None,
    params: ModelParams,
    rng: np.random.Generator,
    fmap_identity: Tensor | None,
    freeze_blocks: int = 0,
) -> Tensor:
    """Rotation loss over one or more rotated copies of the image, pooling
    either the given boxes (mapped into each rotated frame) or the whole map.
    `fmap_identity`, when given, is reused for q=4 instead of recomputing."""
    _, h, w = img.shape
    pooled: list[Tensor] = []
    labels: list[int] = []
    for q in qs:
        if q == 4 and fmap_identity is not None:
            fmap_r = fmap_identity
        else:
            img_r = boxgeom.rotate_image(img, q)
            fmap_r = minidet.backbone_forward(Tensor(img_r), params.theta_f, freeze_blocks)
        if boxes is not None and len(boxes) > 0:
            regions = rotsup.boxcrop(
                fmap_r, boxgeom.rotate_box(boxes, q, w, h), minidet.STRIDE
            )
        else:
            regions = [rotsup.whole_map_pool(fmap_r, minidet.STRIDE)]
        pooled.extend(regions)
        labels.extend([q] * len(regions))
    logits = rotsup.rotation_head_forward(pooled, params.theta_r, train=True, rng=rng)
    return rotsup.rotation_loss(logits, np.asarray(labels))


def pretrain_step(
    sample: scenes.ImageSample,
    params: ModelParams,
    cfg: PretrainConfig,
    opt_state: OptimizerState,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """One SGD step on detection loss + lambda * rotation loss; returns the
    two loss values."""
    img = sample.image
    boxes = sample.boxes
    classes = sample.classes
    all_params = params.all_params()
    with Graph() as g:
        fmap = minidet.backbone_forward(Tensor(img), params.theta_f)
        loss_d, _ = minidet.detection_loss(img, boxes, classes, params, rng, fmap=fmap)
        if cfg.lam > 0:
            q = rotsup.sample_rotation(rng)
            crop_boxes = boxes if cfg.rotation_input == "boxcrop" else None
            loss_r = _rotation_branch_loss(img, [q], crop_boxes, params, rng, fmap)
            total = diffcore.add(loss_d, diffcore.scale(loss_r, cfg.lam))
            lr_val = loss_r.item()
        else:
            total = loss_d
            lr_val = 0.0
    g.backward(total, params=all_params.values())
    diffcore.sgd_momentum_step(all_params, None, opt_state)
    params.check_finite()
    return loss_d.item(), lr_val


def pretrain(
    dataset: list[scenes.ImageSample], cfg: PretrainConfig
) -> tuple[ModelParams, list[dict]]:
    """Iterate pretrain_step over per-epoch reshuffles of the dataset, with
    one learning-rate decay; returns final params and the step log."""
    if not dataset:
        raise ContractViolation("pretrain: empty dataset")
    params = minidet.init_params(cfg.seed)
    opt_state = OptimizerState(cfg.lr, cfg.momentum)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _PRETRAIN_TAG)))
    decay_at = int(cfg.steps * cfg.lr_decay_frac)
    log: list[dict] = []
    order: list[int] = []
    for step in range(cfg.steps):
        if not order:
            order = list(rng.permutation(len(dataset)))
        if step == decay_at:
            opt_state.lr *= cfg.lr_decay_factor
        sample = dataset[order.pop()]
        l_d, l_r = pretrain_step(sample, params, cfg, opt_state, rng)
        log.append(
            {"phase": "pretrain", "step": step, "L_d": l_d, "L_r": l_r, "pseudo_boxes": None}
        )
    return params, log


# ---------------------------------------------------------------------------
# Per-sample adaptation


def _adapt_trainable(params: ModelParams, freeze_blocks: int) -> dict[str, Tensor]:
    """Backbone blocks above the frozen ones, plus the rotation head."""
    trainable = {
        name: t
        for name, t in params.theta_f.items()
        if int(name.split(".")[1][1:]) > freeze_blocks
    }
    trainable.update(params.theta_r)
    return trainable


def adapt_one(
    params: ModelParams, img: np.ndarray, cfg: AdaptConfig
) -> tuple[ModelParams, list[dict]]:
    """Adapt a fresh copy of the params to one unlabeled image by gamma
    rotation-task SGD steps; the proposal/ROI heads stay bit-identical."""
    if cfg.gamma < 0:
        raise ContractViolation(f"adapt_one: gamma must be >= 0, got {cfg.gamma}")
    adapted = params.copy()
    if cfg.gamma == 0:
        return adapted, []
    _, h, w = img.shape
    trainable = _adapt_trainable(adapted, cfg.freeze_blocks)
    opt_state = OptimizerState(cfg.lr, cfg.momentum)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _ADAPT_TAG)))
    log: list[dict] = []
    for it in range(cfg.gamma):
        qs = (
            [rotsup.sample_rotation(rng)]
            if cfg.rotations_per_iter == 1
            else list(boxgeom.ROTATIONS)
        )
        with Graph() as g:
            pseudo_boxes: np.ndarray | None = None
            fmap = None
            n_pseudo = 0
            if cfg.rotation_input == "pseudobox":
                # Pseudo-labels are recomputed from the current backbone
                # every iteration; class labels are discarded.
                fmap = minidet.backbone_forward(Tensor(img), adapted.theta_f, cfg.freeze_blocks)
                dets = minidet.detect_from_fmap(
                    fmap, adapted, w, h, score_thresh=cfg.pseudo_score_thresh
                )
                if dets:
                    pseudo_boxes = np.stack(
                        [d.box for d in dets[: cfg.max_pseudo_boxes]]
                    )
                    n_pseudo = len(pseudo_boxes)
            elif 4 in qs:
                fmap = minidet.backbone_forward(Tensor(img), adapted.theta_f, cfg.freeze_blocks)
            loss_r = _rotation_branch_loss(
                img, qs, pseudo_boxes, adapted, rng, fmap, cfg.freeze_blocks
            )
            loss = diffcore.scale(loss_r, cfg.lam)
        g.backward(loss, params=trainable.values())
        diffcore.sgd_momentum_step(trainable, None, opt_state)
        adapted.check_finite()
        log.append(
            {
                "phase": "adapt",
                "step": it,
                "L_d": None,
                "L_r": loss_r.item(),
                "pseudo_boxes": n_pseudo,
            }
        )
    return adapted, log


def predict_with_adaptation(
    params: ModelParams,
    img: np.ndarray,
    cfg: AdaptConfig,
    eval_cfg: EvalConfig | None = None,
) -> list[Detection]:
    """adapt_one then detect with the adapted backbone; `params` itself is
    never modified."""
    dets, _ = _adapt_and_detect(params, img, cfg, eval_cfg or EvalConfig())
    return dets


def _adapt_and_detect(
    params: ModelParams, img: np.ndarray, cfg: AdaptConfig, eval_cfg: EvalConfig
) -> tuple[list[Detection], list[dict]]:
    adapted, log = adapt_one(params, img, cfg)
    dets = minidet.detect(
        img, adapted, score_thresh=eval_cfg.score_thresh, nms_thresh=eval_cfg.nms_thresh
    )
    return dets, log


# ---------------------------------------------------------------------------
# Streaming evaluation

_WORKER: dict = {}


def _worker_init(params, samples, cfg, eval_cfg):
    _WORKER["params"] = params
    _WORKER["samples"] = samples
    _WORKER["cfg"] = cfg
    _WORKER["eval_cfg"] = eval_cfg


def _worker_eval(index: int):
    params = _WORKER["params"]
    sample = _WORKER["samples"][index]
    cfg = replace(_WORKER["cfg"], seed=derive_seed(_WORKER["cfg"].seed, index))
    dets, log = _adapt_and_detect(params, sample.image, cfg, _WORKER["eval_cfg"])
    return index, dets, log


def evaluate_stream(
    params: ModelParams,
    dataset: list[scenes.ImageSample],
    cfg: AdaptConfig,
    eval_cfg: EvalConfig | None = None,
    class_names: tuple[str, ...] = scenes.CLASS_NAMES,
) -> tuple[list[list[Detection]], evalkit.EvalReport, list[list[dict]]]:
    """Adaptive prediction over every target image, each from a fresh
    parameter snapshot with a per-sample derived seed; results are
    independent of processing order and of the number of jobs."""
    if not dataset:
        raise ContractViolation("evaluate_stream: empty dataset")
    eval_cfg = eval_cfg or EvalConfig()
    n = len(dataset)
    results: list[list[Detection] | None] = [None] * n
    logs: list[list[dict]] = [[] for _ in range(n)]
    if eval_cfg.jobs > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(
            eval_cfg.jobs, initializer=_worker_init, initargs=(params, dataset, cfg, eval_cfg)
        ) as pool:
            for index, dets, log in pool.imap_unordered(_worker_eval, range(n)):
                results[index] = dets
                logs[index] = log
    else:
        _worker_init(params, dataset, cfg, eval_cfg)
        for i in range(n):
            index, dets, log = _worker_eval(i)
            results[index] = dets
            logs[index] = log
    dets_per_image = [r if r is not None else [] for r in results]
    gts = [(s.boxes, s.classes) for s in dataset]
    top_k = eval_cfg.top_k if eval_cfg.top_k is not None else n
    report = evalkit.build_report(
        dets_per_image, gts, class_names, eval_cfg.iou_thresh, top_k
    )
    return dets_per_image, report, logs


def gamma_sweep(
    params: ModelParams,
    dataset: list[scenes.ImageSample],
    gammas: list[int],
    cfg: AdaptConfig,
    eval_cfg: EvalConfig | None = None,
) -> list[tuple[int, float]]:
    """mAP at each gamma, with identical per-sample seeds across points."""
    curve = []
    for gamma in gammas:
        if gamma < 0:
            raise ContractViolation(f"gamma_sweep: gamma must be >= 0, got {gamma}")
        _, report, _ = evaluate_stream(
            params, dataset, replace(cfg, gamma=gamma), eval_cfg
        )
        curve.append((gamma, report.map))
    return curve
