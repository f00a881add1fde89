"""Procedural scene generator and dataset persistence.

Scenes are 128x128 RGB images in [0,1] containing 1-4 colored shapes
(circle, square, triangle, star, cross) over a textured background with a
mild vertical luminance gradient. Annotations are exact continuous
bounding boxes. Photometric styles (fog, posterize, hueshift, noise)
emulate per-image domain shift without moving any geometry.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import boxgeom
from .errors import ContractViolation, DatasetError

IMAGE_SIZE = 128
CLASS_NAMES = ("circle", "square", "triangle", "star", "cross")
NUM_CLASSES = len(CLASS_NAMES)
STYLE_IDS = ("plain", "fog", "posterize", "hueshift", "noise")
SHIFT_STYLES = ("fog", "posterize", "hueshift", "noise")

MIN_SIZE = 16.0
MAX_SIZE = 56.0
MAX_OBJECTS = 4
MAX_OVERLAP_IOU = 0.3
DATASET_VERSION = 1


@dataclass
class Annotation:
    cls: int
    box: np.ndarray  # (4,) x1,y1,x2,y2


@dataclass
class StyleSpec:
    id: str
    params: dict = field(default_factory=dict)


@dataclass
class ImageSample:
    image: np.ndarray  # (3, H, W) float32 in [0,1]
    annotations: list[Annotation]
    style: str
    sample_seed: int

    @property
    def boxes(self) -> np.ndarray:
        if not self.annotations:
            return np.zeros((0, 4))
        return np.stack([a.box for a in self.annotations])

    @property
    def classes(self) -> np.ndarray:
        return np.asarray([a.cls for a in self.annotations], dtype=np.int64)


# ---------------------------------------------------------------------------
# Drawing helpers (pixel centers at integer + 0.5)


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """(C, gh, gw) control grid -> (C, size, size) bilinear surface."""
    c, gh, gw = grid.shape
    ys = np.linspace(0, gh - 1, size)
    xs = np.linspace(0, gw - 1, size)
    y0 = np.clip(ys.astype(int), 0, gh - 2)
    x0 = np.clip(xs.astype(int), 0, gw - 2)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    g00 = grid[:, y0][:, :, x0]
    g01 = grid[:, y0][:, :, x0 + 1]
    g10 = grid[:, y0 + 1][:, :, x0]
    g11 = grid[:, y0 + 1][:, :, x0 + 1]
    return (
        g00 * (1 - fy) * (1 - fx)
        + g01 * (1 - fy) * fx
        + g10 * fy * (1 - fx)
        + g11 * fy * fx
    )


def _shape_mask(cls: int, box: np.ndarray, size: int) -> np.ndarray:
    """Boolean (size, size) mask of a shape drawn to exactly touch its box."""
    x1, y1, x2, y2 = box
    px = np.arange(size) + 0.5
    x = np.broadcast_to(px[None, :], (size, size))
    y = np.broadcast_to(px[:, None], (size, size))
    w = x2 - x1
    h = y2 - y1
    cx = (x1 + x2) / 2.0
    cy = (y1 + y2) / 2.0
    name = CLASS_NAMES[cls]
    if name == "circle":
        r = min(w, h) / 2.0
        return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
    if name == "square":
        return (x >= x1) & (x <= x2) & (y >= y1) & (y <= y2)
    if name == "triangle":
        # Apex at the top-center, base along the bottom edge.
        left = (x - x1) * (y1 - y2) - (y - y2) * (cx - x1)
        right = (x - x2) * (y1 - y2) - (y - y2) * (cx - x2)
        return (y <= y2) & (left >= 0) & (right <= 0)
    if name == "star":
        return _polygon_mask(_star_vertices(box), x, y)
    if name == "cross":
        # Off-center bar heights/widths break the quarter-turn symmetry.
        hbar = (y >= y1 + 0.22 * h) & (y <= y1 + 0.58 * h) & (x >= x1) & (x <= x2)
        vbar = (x >= cx - 0.11 * w) & (x <= cx + 0.11 * w) & (y >= y1) & (y <= y2)
        return hbar | vbar
    raise ContractViolation(f"unknown shape class {cls}")


def _star_vertices(box: np.ndarray) -> np.ndarray:
    """Five-point star, apex up, stretched to touch all four box edges."""
    x1, y1, x2, y2 = box
    angles = -np.pi / 2 + np.arange(10) * np.pi / 5
    radius = np.where(np.arange(10) % 2 == 0, 1.0, 0.381966)
    vx = radius * np.cos(angles)
    vy = radius * np.sin(angles)
    vx = (vx - vx.min()) / (vx.max() - vx.min()) * (x2 - x1) + x1
    vy = (vy - vy.min()) / (vy.max() - vy.min()) * (y2 - y1) + y1
    return np.stack([vx, vy], axis=1)


def _polygon_mask(verts: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Even-odd ray casting, vectorized over the pixel grid."""
    inside = np.zeros(x.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        xa, ya = verts[i]
        xb, yb = verts[(i + 1) % n]
        crosses = (ya > y) != (yb > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = xa + (y - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (x < xi)
    return inside


def _vivid_color(rng: np.random.Generator) -> np.ndarray:
    """A color with every channel pushed away from the mid-gray background."""
    lo = rng.uniform(0.0, 0.2, size=3)
    hi = rng.uniform(0.8, 1.0, size=3)
    pick = rng.integers(0, 2, size=3).astype(bool)
    color = np.where(pick, hi, lo)
    if not pick.any():  # avoid near-black-on-dark scenes
        color[rng.integers(0, 3)] = rng.uniform(0.8, 1.0)
    return color


def gen_scene(rng: np.random.Generator) -> ImageSample:
    """One plain-style scene with 1-4 shapes and exact annotations."""
    size = IMAGE_SIZE
    base = rng.uniform(0.3, 0.7, size=(3, 5, 5))
    img = _bilinear_upsample(base, size)
    gradient = np.linspace(1, -1, size)[None, :, None] * rng.uniform(0.06, 0.14)
    img = np.clip(img + gradient, 0.0, 1.0)

    n_objects = int(rng.integers(1, MAX_OBJECTS + 1))
    annotations: list[Annotation] = []
    placed: list[np.ndarray] = []
    for k in range(n_objects):
        for _attempt in range(100):
            cls = int(rng.integers(0, NUM_CLASSES))
            w = float(rng.uniform(MIN_SIZE, MAX_SIZE))
            h = w if CLASS_NAMES[cls] in ("circle", "square", "star") else float(
                rng.uniform(MIN_SIZE, MAX_SIZE)
            )
            x1 = float(rng.uniform(0.0, size - w))
            y1 = float(rng.uniform(0.0, size - h))
            box = np.array([x1, y1, x1 + w, y1 + h])
            if all(boxgeom.iou(box, p) <= MAX_OVERLAP_IOU for p in placed):
                break
        else:
            if k == 0:
                raise ContractViolation("gen_scene: failed to place any object")
            continue
        mask = _shape_mask(cls, box, size)
        img = np.where(mask[None, :, :], _vivid_color(rng)[:, None, None], img)
        placed.append(box)
        annotations.append(Annotation(cls, box))

    seed64 = int(rng.integers(0, 2**63))
    return ImageSample(img.astype(np.float32), annotations, "plain", seed64)


# ---------------------------------------------------------------------------
# Styles


def sample_style(style_id: str, rng: np.random.Generator) -> StyleSpec:
    """Draw concrete parameters for a style id."""
    if style_id == "plain":
        return StyleSpec("plain")
    if style_id == "fog":
        return StyleSpec("fog", {"a": float(rng.uniform(0.4, 0.8))})
    if style_id == "posterize":
        return StyleSpec("posterize", {"levels": int(rng.integers(2, 4))})
    if style_id == "hueshift":
        return StyleSpec("hueshift", {"degrees": float(rng.uniform(60.0, 300.0))})
    if style_id == "noise":
        return StyleSpec("noise", {"sigma": float(rng.uniform(0.05, 0.15))})
    raise ContractViolation(f"unknown style id '{style_id}'")


def _box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge replication, per channel."""
    pad = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += pad[:, dy : dy + img.shape[1], dx : dx + img.shape[2]]
    return out / 9.0


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rc = (maxc - r) / np.maximum(delta, 1e-12)
        gc = (maxc - g) / np.maximum(delta, 1e-12)
        bc = (maxc - b) / np.maximum(delta, 1e-12)
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[0], hsv[1], hsv[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def apply_style(img: np.ndarray, style: StyleSpec, rng: np.random.Generator) -> np.ndarray:
    """Photometric transform; geometry (and thus all boxes) is unchanged."""
    if style.id == "plain":
        return img
    if style.id == "fog":
        a = style.params["a"]
        return _box_blur3((1.0 - a) * img + a).astype(np.float32)
    if style.id == "posterize":
        levels = style.params["levels"]
        return (np.round(img * (levels - 1)) / (levels - 1)).astype(np.float32)
    if style.id == "hueshift":
        hsv = _rgb_to_hsv(img.astype(np.float64))
        hsv[0] = (hsv[0] + style.params["degrees"] / 360.0) % 1.0
        return np.clip(_hsv_to_rgb(hsv), 0.0, 1.0).astype(np.float32)
    if style.id == "noise":
        sigma = style.params["sigma"]
        return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0).astype(
            np.float32
        )
    raise ContractViolation(f"unknown style id '{style.id}'")


# ---------------------------------------------------------------------------
# Dataset construction


def resolve_styles(styles: str | list[str]) -> tuple[str, ...]:
    """CLI-style spec -> tuple of per-image candidate style ids.

    "random" means a uniform draw over the four shifted styles."""
    if isinstance(styles, str):
        styles = [s.strip() for s in styles.split(",") if s.strip()]
    out: list[str] = []
    for s in styles:
        if s == "random":
            out.extend(SHIFT_STYLES)
        elif s in STYLE_IDS:
            out.append(s)
        else:
            raise ContractViolation(f"unknown style '{s}' (choose from {STYLE_IDS} or 'random')")
    if not out:
        raise ContractViolation("no styles given")
    return tuple(out)


def gen_sample(seed: int, index: int, style_choices: tuple[str, ...] = ("plain",)) -> ImageSample:
    """Pure function of (seed, index, styles): scene plus a drawn style."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    sample = gen_scene(rng)
    style_id = style_choices[int(rng.integers(0, len(style_choices)))]
    spec = sample_style(style_id, rng)
    image = apply_style(sample.image, spec, rng)
    return ImageSample(image, sample.annotations, style_id, sample.sample_seed)


def gen_dataset(count: int, seed: int, styles: str | list[str] = "plain") -> list[ImageSample]:
    choices = resolve_styles(styles)
    return [gen_sample(seed, i, choices) for i in range(count)]


# ---------------------------------------------------------------------------
# Persistence


def write_dataset(samples: list[ImageSample], out_dir) -> None:
    """Layout: meta.json, images/{index}.png (8-bit RGB), annotations.jsonl."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    styles = sorted({s.style for s in samples})
    meta = {
        "version": DATASET_VERSION,
        "count": len(samples),
        "classes": list(CLASS_NAMES),
        "styles": styles,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    with open(root / "annotations.jsonl", "w") as fh:
        for i, s in enumerate(samples):
            rec = {
                "index": i,
                "style": s.style,
                "boxes": [
                    {
                        "c": int(a.cls),
                        "x1": float(a.box[0]),
                        "y1": float(a.box[1]),
                        "x2": float(a.box[2]),
                        "y2": float(a.box[3]),
                    }
                    for a in s.annotations
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            # Quantize in f64 so the 8-bit round trip stays within 1/510.
            arr = np.round(np.clip(s.image.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
            Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(
                root / "images" / f"{i}.png"
            )


def read_dataset(in_dir) -> list[ImageSample]:
    root = Path(in_dir)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"missing file: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt file: {meta_path}: {e}") from e
    if meta.get("version") != DATASET_VERSION:
        raise DatasetError(
            f"{meta_path}: version {meta.get('version')} != supported {DATASET_VERSION}"
        )
    ann_path = root / "annotations.jsonl"
    if not ann_path.exists():
        raise DatasetError(f"missing file: {ann_path}")
    samples: list[ImageSample] = []
    with open(ann_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"corrupt file: {ann_path}: {e}") from e
            idx = rec["index"]
            img_path = root / "images" / f"{idx}.png"
            if not img_path.exists():
                raise DatasetError(f"missing file: {img_path}")
            arr = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64)
            image = (arr / 255.0).transpose(2, 0, 1).astype(np.float32)
            anns = [
                Annotation(int(b["c"]), np.array([b["x1"], b["y1"], b["x2"], b["y2"]]))
                for b in rec["boxes"]
            ]
            samples.append(ImageSample(image, anns, rec["style"], idx))
    if len(samples) != meta["count"]:
        raise DatasetError(
            f"{ann_path}: {len(samples)} records != meta count {meta['count']}"
        )
    return samples
