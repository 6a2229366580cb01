"""Synthetic scenes, object removal, resizing, heatmaps and image I/O.

Rasters are ``uint8`` arrays of shape (height, width, 3); masks are boolean
(height, width) arrays. Bounding boxes are COCO-style ``(x, y, w, h)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .vocab import (
    BACKGROUNDS,
    COLORS,
    DEFAULT_VOCAB,
    SHAPE_OF_CATEGORY,
    SYNTHETIC_OBJECTS,
    UNK,
    Vocab,
)

log = logging.getLogger(__name__)

SHAPES = ("circle", "triangle", "square")


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    label: str
    shape: str
    color: str
    bbox: tuple[int, int, int, int]


@dataclass
class Scene:
    width: int
    height: int
    background: str
    objects: list[SceneObject] = field(default_factory=list)

    def validate(self, vocab: Vocab = DEFAULT_VOCAB) -> None:
        if self.background not in BACKGROUNDS:
            raise ImageError(f"unknown background {self.background!r}")
        for obj in self.objects:
            x, y, w, h = obj.bbox
            if w < 1 or h < 1 or x < 0 or y < 0 or x + w > self.width or y + h > self.height:
                raise ImageError(f"bbox {obj.bbox} of {obj.label!r} outside canvas")
            if obj.label not in vocab:
                raise ImageError(f"label {obj.label!r} not in vocabulary")
            if obj.shape not in SHAPES or obj.color not in COLORS:
                raise ImageError(f"unsupported shape/color for {obj.label!r}")

    def labels_left_to_right(self) -> list[str]:
        objs = sorted(self.objects, key=lambda o: (o.bbox[0] + o.bbox[2] / 2, o.bbox[1]))
        return [o.label for o in objs]

    def without(self, label: str) -> "Scene":
        return Scene(self.width, self.height, self.background,
                     [o for o in self.objects if o.label != label])

    def to_json(self) -> dict:
        d = asdict(self)
        for o in d["objects"]:
            o["bbox"] = list(o["bbox"])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        objs = [SceneObject(o["label"], o["shape"], o["color"], tuple(o["bbox"]))
                for o in d.get("objects", [])]
        return cls(int(d["width"]), int(d["height"]), d["background"], objs)


def synthetic_object(label: str, bbox) -> SceneObject:
    category, color = SYNTHETIC_OBJECTS[label]
    return SceneObject(label, SHAPE_OF_CATEGORY[category], color, tuple(int(v) for v in bbox))


def _shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        ry, rx = max(h / 2, 0.5), max(w / 2, 0.5)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # triangle: apex at top centre, base on the bottom row
    frac = (yy + 1) / h
    return np.abs(xx - cx) <= frac * (w / 2)


def render_scene(scene: Scene, seed: int = 0) -> np.ndarray:
    """Rasterize ``scene``; ``seed`` drives a small per-object shade jitter."""
    scene.validate()
    img = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    img[:] = BACKGROUNDS[scene.background]
    rng = np.random.default_rng(seed)
    for obj in scene.objects:
        x, y, w, h = obj.bbox
        jitter = rng.integers(-12, 13, size=3)
        color = np.clip(np.array(COLORS[obj.color]) + jitter, 0, 255).astype(np.uint8)
        m = _shape_mask(obj.shape, w, h)
        region = img[y:y + h, x:x + w]
        region[m] = color
    return img


def random_scene(
    rng: np.random.Generator,
    labels: Sequence[str],
    width: int = 32,
    height: int = 32,
    background: str | None = None,
    cell: int = 8,
) -> Scene:
    """Place synthetic objects in distinct grid columns, in random order.

    Each object lies inside one ``cell`` x ``cell`` grid square, so with the
    default 4x4 patch grid every object occupies exactly one image token and
    left-to-right order is unambiguous at patch resolution.
    """
    if width % cell or height % cell:
        raise ImageError("canvas must split into whole cells")
    n_cols, n_rows = width // cell, height // cell
    if len(labels) > n_cols:
        raise ImageError(f"at most {n_cols} objects per scene")
    bg = background or str(rng.choice(sorted(BACKGROUNDS)))
    cols = rng.choice(n_cols, size=len(labels), replace=False)
    objs = []
    for label, col in zip(labels, cols):
        row = int(rng.integers(0, n_rows))
        w = int(rng.integers(5, cell + 1))
        h = int(rng.integers(5, cell + 1))
        x = int(col) * cell + int(rng.integers(0, cell - w + 1))
        y = row * cell + int(rng.integers(0, cell - h + 1))
        objs.append(synthetic_object(label, (x, y, w, h)))
    return Scene(width, height, bg, objs)


def bbox_mask(bbox, height: int, width: int, pad: int = 0) -> np.ndarray:
    x, y, w, h = (int(round(v)) for v in bbox)
    m = np.zeros((height, width), dtype=bool)
    m[max(y - pad, 0):min(y + h + pad, height), max(x - pad, 0):min(x + w + pad, width)] = True
    if not m.any():
        raise ImageError(f"bbox {bbox} yields an empty mask")
    return m


def bboxes_overlap(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


# ---------------------------------------------------------------------------
# inpainting
# ---------------------------------------------------------------------------


def inpaint(
    image: np.ndarray,
    mask: np.ndarray,
    method: str = "telea",
    radius: int = 5,
    background=None,
) -> np.ndarray:
    """Remove the masked region.

    ``background_fill`` paints ``background`` (an RGB triple) into the mask;
    ``telea`` reconstructs it by fast marching from the mask boundary.
    Pixels outside the mask are never touched.
    """
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if image.ndim != 3 or image.shape[:2] != mask.shape:
        raise ImageError(f"mask {mask.shape} does not match image {image.shape}")
    if not mask.any():
        raise ImageError("inpaint mask is empty")
    out = image.copy()
    if method == "background_fill":
        if background is None:
            raise ImageError("background_fill needs a background color")
        out[mask] = np.asarray(background, dtype=np.uint8)
        return out
    if method != "telea":
        raise ImageError(f"unknown inpaint method {method!r}")
    if radius < 1:
        raise ImageError("telea radius must be >= 1")
    if mask.all():
        raise ImageError("telea needs at least one known pixel")
    work = image.astype(np.float64)
    _kernels.telea_fill(work, np.ascontiguousarray(mask), int(radius))
    filled = np.clip(np.rint(work), 0, 255).astype(np.uint8)
    out[mask] = filled[mask]
    return out


# ---------------------------------------------------------------------------
# resizing and heatmaps
# ---------------------------------------------------------------------------


def bilinear_resize(grid, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre (align_corners=False) bilinear resize of a 2-D grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or min(grid.shape) < 1:
        raise ImageError(f"grid must be 2-D and nonempty, got {grid.shape}")
    if height < 1 or width < 1:
        raise ImageError("output dims must be positive")
    return _kernels.bilinear_resize(grid, int(height), int(width))


HEAT_TINT = (255, 0, 0)


def heatmap_overlay(
    values, layout: tuple[int, int], image: np.ndarray, alpha: float = 0.6, tint=HEAT_TINT
) -> np.ndarray:
    """Blend per-patch ``values`` over ``image`` as a single-hue tint."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    rows, cols = layout
    if rows * cols != values.size:
        raise ImageError(f"layout {rows}x{cols} does not hold {values.size} patch values")
    lo, hi = values.min(), values.max()
    norm = np.ones_like(values) if hi - lo <= 0 else (values - lo) / (hi - lo)
    H, W = image.shape[:2]
    weight = np.clip(bilinear_resize(norm.reshape(rows, cols), H, W), 0.0, 1.0)[..., None] * alpha
    blended = image.astype(np.float64) * (1.0 - weight) + np.asarray(tint, dtype=np.float64) * weight
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# PPM (P6) I/O
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageError("PPM writer needs an (H, W, 3) uint8 raster")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ImageError(f"{path}: only 8-bit P6 PPM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).copy()


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image  # optional, only for non-PPM inputs

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear per-channel resize of a raster (used for ingested photos)."""
    if image.shape[:2] == (height, width):
        return image.copy()
    chans = [bilinear_resize(image[..., c], height, width) for c in range(image.shape[2])]
    return np.clip(np.rint(np.stack(chans, axis=-1)), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# COCO-like annotations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: int
    image_path: Path
    label: str
    bbox: tuple[float, float, float, float]
    other_bboxes: tuple[tuple[float, float, float, float], ...] = ()


@dataclass
class AnnotationSet:
    records: list[AnnotationRecord]
    rejected: list[tuple[dict, str]]


def _label_for(name: str, vocab: Vocab) -> str:
    words = name.lower().split()
    if words and all(w in vocab for w in words):
        return " ".join(words)
    return UNK


def load_annotations(directory, vocab: Vocab = DEFAULT_VOCAB,
                     filename: str = "annotations.json") -> AnnotationSet:
    """Join a COCO-style ``annotations.json`` into per-object records.

    Schema: ``images`` [{id, file_name, width, height}], ``annotations``
    [{id, image_id, category_id, bbox: [x, y, w, h]}], ``categories``
    [{id, name}]. Boxes leaving the image are rejected with a reason.
    """
    directory = Path(directory)
    try:
        doc = json.loads((directory / filename).read_text())
        images = {int(im["id"]): im for im in doc["images"]}
        cats = {int(c["id"]): c["name"] for c in doc["categories"]}
        anns = list(doc["annotations"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ImageError(f"malformed annotation file: {exc}") from exc

    by_image: dict[int, list[dict]] = {}
    for ann in anns:
        by_image.setdefault(int(ann["image_id"]), []).append(ann)

    records, rejected = [], []
    for ann in anns:
        img = images.get(int(ann["image_id"]))
        if img is None:
            rejected.append((ann, "unknown image_id"))
            continue
        path = directory / img["file_name"]
        if not path.exists():
            raise ImageError(f"missing image file {path}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > img["width"] or y + h > img["height"]:
            rejected.append((ann, "bbox exceeds image bounds"))
            continue
        others = tuple(
            tuple(float(v) for v in o["bbox"]) for o in by_image[int(ann["image_id"])]
            if o is not ann
        )
        label = _label_for(cats.get(int(ann["category_id"]), ""), vocab)
        records.append(AnnotationRecord(int(img["id"]), path, label, (x, y, w, h), others))
    return AnnotationSet(records, rejected)


# ---------------------------------------------------------------------------
# scene corpus spec files
# ---------------------------------------------------------------------------


def save_corpus_spec(path, scenes: Sequence[tuple[Scene, int]]) -> None:
    doc = {"scenes": [{"seed": seed, **scene.to_json()} for scene, seed in scenes]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_corpus_spec(path) -> list[tuple[Scene, int]]:
    doc = json.loads(Path(path).read_text())
    return [(Scene.from_json(d), int(d.get("seed", 0))) for d in doc["scenes"]]
