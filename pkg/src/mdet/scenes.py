"""Deterministic synthetic maritime scenes with box annotations.

A scene is a sky/water gradient with wave texture plus one object per
annotation: buoys (small), small vessels (medium) and large vessels
(large).  Class identity is tied one-to-one to the size band so that
per-band detection metrics are meaningful by construction:

    small:  bbox area < 32 * 32
    medium: 32 * 32 <= bbox area <= 96 * 96
    large:  bbox area > 96 * 96

Boxes are tight integer-pixel bounds of the rasterized object mask.
Everything derives from ``default_rng([seed, image_id])``, so a
(config, image_id) pair always produces bitwise identical pixels and
annotations, on any platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AnnotationError, ConfigError, FormatError, GenerationError

CLASS_NAMES = ("buoy", "small_vessel", "large_vessel")

SMALL_MAX_AREA = 32 * 32      # exclusive upper bound for "small"
MEDIUM_MAX_AREA = 96 * 96     # inclusive upper bound for "medium"

BANDS = ("small", "medium", "large")

_PLACE_TRIES = 40
_BAND_TRIES = 4


def size_band(width: float, height: float) -> str:
    """Band of a box by area; bounds follow the 32/96 pixel squares."""
    if width <= 0 or height <= 0:
        raise AnnotationError(f"degenerate box (w={width}, h={height})")
    area = width * height
    if area < SMALL_MAX_AREA:
        return "small"
    if area <= MEDIUM_MAX_AREA:
        return "medium"
    return "large"


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    height: int = 256
    width: int = 256
    min_objects: int = 1
    max_objects: int = 4
    horizon: float = 0.4
    size_weights: tuple = (0.35, 0.40, 0.25)
    clutter: float = 0.5

    def validate(self) -> "SceneConfig":
        if self.height < 64 or self.width < 64:
            raise ConfigError(
                f"scene {self.width}x{self.height} too small (min 64)")
        if not 0 < self.min_objects <= self.max_objects:
            raise ConfigError(
                f"bad object count range [{self.min_objects}, "
                f"{self.max_objects}]")
        if not 0.1 <= self.horizon <= 0.8:
            raise ConfigError(f"horizon fraction {self.horizon} outside "
                              "[0.1, 0.8]")
        if len(self.size_weights) != 3 or min(self.size_weights) < 0 \
                or sum(self.size_weights) <= 0:
            raise ConfigError(f"bad size weights {self.size_weights}")
        if not 0.0 <= self.clutter <= 1.0:
            raise ConfigError(f"clutter {self.clutter} outside [0, 1]")
        return self


@dataclass
class SceneAnnotation:
    image_id: int
    boxes: np.ndarray      # (N, 4) float (x, y, w, h) pixels
    class_ids: np.ndarray  # (N,) int
    image_size: tuple      # (H, W)

    @property
    def bands(self) -> list:
        return [size_band(w, h) for _, _, w, h in self.boxes]


def _paint_background(rng, cfg):
    h, w = cfg.height, cfg.width
    horizon_y = int(h * cfg.horizon)
    img = np.zeros((3, h, w), dtype=np.float64)

    tint = rng.uniform(-0.03, 0.03, 3)
    sky_top = np.array([0.55, 0.70, 0.85]) + tint
    sky_low = np.array([0.78, 0.83, 0.88]) + tint
    ramp = np.linspace(0.0, 1.0, max(horizon_y, 1))[:, None]
    sky = sky_top[:, None, None] * (1 - ramp)[None, :, :] \
        + sky_low[:, None, None] * ramp[None, :, :]
    img[:, :horizon_y, :] = sky

    water_rows = h - horizon_y
    deep = np.array([0.06, 0.16, 0.30]) + tint * 0.5
    near = np.array([0.10, 0.26, 0.40]) + tint * 0.5
    ramp = np.linspace(1.0, 0.0, water_rows)[:, None]
    water = near[:, None, None] * ramp[None, :, :] \
        + deep[:, None, None] * (1 - ramp)[None, :, :]
    yy = np.arange(water_rows)[:, None]
    xx = np.arange(w)[None, :]
    f1 = rng.uniform(0.05, 0.12)
    f2 = rng.uniform(0.01, 0.03)
    phase = rng.uniform(0, 2 * np.pi, 2)
    waves = 0.02 * cfg.clutter * (
        np.sin(2 * np.pi * f1 * yy + 2 * np.pi * f2 * xx + phase[0])
        + 0.6 * np.sin(2 * np.pi * 0.4 * f1 * yy - 2 * np.pi * 2.1 * f2 * xx
                       + phase[1]))
    speckle = rng.normal(0.0, 0.008 * cfg.clutter, (water_rows, w))
    img[:, horizon_y:, :] = water + (waves + speckle)[None, :, :]
    return img, horizon_y


def _disk_mask(h, w, cx, cy, r):
    yy, xx = np.ogrid[:h, :w]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _draw_buoy(canvas, rng, x0, y0, d):
    """Disk of diameter about d at (x0, y0); returns the painted mask."""
    h, w = canvas.shape[1:]
    r = d / 2.0
    mask = _disk_mask(h, w, x0 + r, y0 + r, r)
    color = np.array([0.95, 0.35, 0.10]) + rng.uniform(-0.05, 0.05, 3)
    canvas[:, mask] = color[:, None]
    return mask


def _draw_small_vessel(canvas, rng, x0, y0, wdt, hgt):
    """Tapered hull plus a cabin block; bbox is exactly wdt x hgt."""
    h, w = canvas.shape[1:]
    mask = np.zeros((h, w), dtype=bool)
    hull_h = max(int(hgt * 0.55), 3)
    cab_h = hgt - hull_h
    hull_top = y0 + cab_h
    for i in range(hull_h):
        frac = i / max(hull_h - 1, 1)
        half = (wdt / 2.0) * (1.0 - 0.35 * frac)
        cx = x0 + wdt / 2.0
        a = int(np.ceil(cx - half))
        b = int(np.floor(cx + half))
        if i == 0:
            a, b = x0, x0 + wdt - 1  # widest row pins the bbox width
        mask[hull_top + i, max(a, 0):min(b, w - 1) + 1] = True
    cab_w = max(int(wdt * 0.4), 2)
    cab_x = x0 + int(wdt * 0.3)
    mask[y0:hull_top, cab_x:cab_x + cab_w] = True
    hull_color = np.array([0.88, 0.89, 0.92]) + rng.uniform(-0.04, 0.04, 3)
    canvas[:, mask] = hull_color[:, None]
    cab = np.zeros_like(mask)
    cab[y0:hull_top, cab_x:cab_x + cab_w] = True
    canvas[:, cab] = (hull_color * 0.75)[:, None]
    return mask


def _draw_large_vessel(canvas, rng, x0, y0, wdt, hgt):
    """Long hull with a raked bow and a stern superstructure."""
    h, w = canvas.shape[1:]
    mask = np.zeros((h, w), dtype=bool)
    hull_h = max(int(hgt * 0.45), 4)
    sup_h = hgt - hull_h
    hull_top = y0 + sup_h
    bow = max(int(wdt * 0.12), 2)
    for i in range(hull_h):
        frac = i / max(hull_h - 1, 1)
        right = x0 + wdt - 1 - int(bow * frac)
        if i == 0:
            right = x0 + wdt - 1
        mask[hull_top + i, x0:right + 1] = True
    sup_w = max(int(wdt * 0.22), 3)
    sup_x = x0 + int(wdt * 0.08)
    mask[y0:hull_top, sup_x:sup_x + sup_w] = True
    funnel_w = max(sup_w // 3, 1)
    mask[y0:y0 + max(sup_h // 2, 1),
         sup_x + sup_w + 2:sup_x + sup_w + 2 + funnel_w] = True
    hull_color = np.array([0.45, 0.13, 0.10]) + rng.uniform(-0.04, 0.04, 3)
    sup_color = np.array([0.85, 0.87, 0.90]) + rng.uniform(-0.03, 0.03, 3)
    canvas[:, mask] = hull_color[:, None]
    sup = np.zeros_like(mask)
    sup[y0:hull_top, sup_x:] = mask[y0:hull_top, sup_x:]
    canvas[:, sup] = sup_color[:, None]
    return mask


def _mask_bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x, y = cols[0], rows[0]
    return float(x), float(y), float(cols[-1] - x + 1), float(rows[-1] - y + 1)


def _sample_dims(rng, band, cfg):
    if band == "small":
        d = int(rng.integers(6, 25))
        return d, d
    if band == "medium":
        wdt = int(rng.integers(36, 89))
        hmin = max(12, int(np.ceil(SMALL_MAX_AREA / wdt)) + 1)
        hmax = min(60, MEDIUM_MAX_AREA // wdt)
        if hmin > hmax:
            return None
        return wdt, int(rng.integers(hmin, hmax + 1))
    wmax = min(cfg.width - 12, 210)
    wdt = int(rng.integers(112, wmax + 1))
    hmin = int(np.ceil((MEDIUM_MAX_AREA + 1) / wdt))
    hmax = min(92, cfg.height - int(cfg.height * cfg.horizon) - 10)
    if hmin > hmax:
        return None
    return wdt, int(rng.integers(hmin, hmax + 1))


def _boxes_clash(a, b, gap=3.0):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return not (ax + aw + gap <= bx or bx + bw + gap <= ax
                or ay + ah + gap <= by or by + bh + gap <= ay)


def generate_scene(cfg: SceneConfig, image_id: int = 0):
    """Render one scene; returns (float32 RGB image in [0, 1], annotation)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, image_id])
    canvas, horizon_y = _paint_background(rng, cfg)
    h, w = cfg.height, cfg.width

    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    weights = np.asarray(cfg.size_weights, dtype=np.float64)
    weights = weights / weights.sum()

    # Draw all intended bands up front, then place big objects first:
    # wide hulls need open water, buoys fit almost anywhere.
    intended = [int(rng.choice(3, p=weights)) for _ in range(count)]
    intended.sort(reverse=True)

    boxes = []
    class_ids = []
    for band_idx in intended:
        placed = False
        for band_try in range(_BAND_TRIES):
            if band_try == _BAND_TRIES - 1:
                band_idx = 0  # last resort: a buoy fits almost anywhere
            elif band_try > 0:
                band_idx = int(rng.choice(3, p=weights))
            band = BANDS[band_idx]
            for _try in range(_PLACE_TRIES):
                dims = _sample_dims(rng, band, cfg)
                if dims is None:
                    continue
                wdt, hgt = dims
                x0 = int(rng.integers(4, max(w - wdt - 4, 5)))
                # Bottom edge rests in the water.
                ymin = max(horizon_y - hgt // 3, 2)
                ymax = h - hgt - 4
                if ymax <= ymin:
                    continue
                y0 = int(rng.integers(ymin, ymax + 1))
                cand = (float(x0), float(y0), float(wdt), float(hgt))
                if any(_boxes_clash(cand, b) for b in boxes):
                    continue
                snapshot = canvas.copy()
                if band == "small":
                    mask = _draw_buoy(canvas, rng, x0, y0, wdt)
                elif band == "medium":
                    mask = _draw_small_vessel(canvas, rng, x0, y0, wdt, hgt)
                else:
                    mask = _draw_large_vessel(canvas, rng, x0, y0, wdt, hgt)
                bbox = _mask_bbox(mask)
                if size_band(bbox[2], bbox[3]) != band:
                    # Rasterization changed the band: undo the paint and
                    # resample (rare; keeps the band contract exact).
                    canvas[:] = snapshot
                    continue
                boxes.append(bbox)
                class_ids.append(band_idx)
                placed = True
                break
            if placed:
                break
        if not placed:
            raise GenerationError(
                f"scene {image_id}: could not place object "
                f"{len(boxes) + 1} of {count} after "
                f"{_BAND_TRIES * _PLACE_TRIES} attempts"
            )

    img = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    ann = SceneAnnotation(
        image_id=image_id,
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        class_ids=np.asarray(class_ids, dtype=np.intp),
        image_size=(h, w),
    )
    return img, ann


# ---------------------------------------------------------------------------
# image files


def save_png(path, image) -> None:
    """Write a (3, H, W) float image in [0, 1] as an 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise FormatError(f"{path}: expected (3, H, W) image, got {arr.shape}")
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(
        str(path), format="PNG")


def load_png(path) -> np.ndarray:
    try:
        with Image.open(str(path)) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read PNG: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------------
# COCO-style annotation files


def write_coco(path, annotations, file_names) -> None:
    """Write scenes to a COCO-style JSON file.

    ``annotations`` maps image_id -> SceneAnnotation and ``file_names``
    maps image_id -> file name.  Category ids are class ids + 1, as is
    conventional for that layout.
    """
    images = []
    anns = []
    next_id = 1
    for image_id in sorted(annotations):
        ann = annotations[image_id]
        h, w = ann.image_size
        images.append({
            "id": int(image_id),
            "file_name": str(file_names[image_id]),
            "height": int(h),
            "width": int(w),
        })
        for box, cid in zip(ann.boxes, ann.class_ids):
            x, y, bw, bh = (float(v) for v in box)
            anns.append({
                "id": next_id,
                "image_id": int(image_id),
                "category_id": int(cid) + 1,
                "bbox": [x, y, bw, bh],
                "area": bw * bh,
                "iscrowd": 0,
            })
            next_id += 1
    doc = {
        "images": images,
        "annotations": anns,
        "categories": [
            {"id": i + 1, "name": name} for i, name in enumerate(CLASS_NAMES)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def read_coco(path):
    """Read a COCO-style JSON file.

    Returns (annotations dict image_id -> SceneAnnotation, file_names
    dict image_id -> str).  Structural problems raise FormatError with
    the path and offending element; degenerate boxes and unknown
    category ids raise AnnotationError.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    except OSError as exc:
        raise FormatError(f"{path}: cannot read: {exc}") from exc
    for key in ("images", "annotations"):
        if key not in doc or not isinstance(doc[key], list):
            raise FormatError(f"{path}: missing '{key}' list")

    sizes = {}
    file_names = {}
    for i, entry in enumerate(doc["images"]):
        try:
            image_id = int(entry["id"])
            sizes[image_id] = (int(entry["height"]), int(entry["width"]))
            file_names[image_id] = str(entry["file_name"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: images[{i}]: {exc!r}") from exc

    ncat = len(doc.get("categories", [])) or len(CLASS_NAMES)
    boxes = {iid: [] for iid in sizes}
    classes = {iid: [] for iid in sizes}
    for i, entry in enumerate(doc["annotations"]):
        try:
            image_id = int(entry["image_id"])
            x, y, bw, bh = (float(v) for v in entry["bbox"])
            cat = int(entry["category_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: annotations[{i}]: {exc!r}") from exc
        if image_id not in sizes:
            raise FormatError(
                f"{path}: annotations[{i}]: unknown image id {image_id}")
        if bw <= 0 or bh <= 0:
            raise AnnotationError(
                f"{path}: annotations[{i}]: degenerate box {entry['bbox']}")
        if not 1 <= cat <= ncat:
            raise AnnotationError(
                f"{path}: annotations[{i}]: category id {cat} outside "
                f"1..{ncat}")
        boxes[image_id].append((x, y, bw, bh))
        classes[image_id].append(cat - 1)

    annotations = {}
    for image_id, size in sizes.items():
        annotations[image_id] = SceneAnnotation(
            image_id=image_id,
            boxes=np.asarray(boxes[image_id], dtype=np.float64).reshape(-1, 4),
            class_ids=np.asarray(classes[image_id], dtype=np.intp),
            image_size=size,
        )
    return annotations, file_names


# ---------------------------------------------------------------------------
# datasets on disk


@dataclass
class Dataset:
    root: Path
    annotations: dict = field(default_factory=dict)  # image_id -> ann
    file_names: dict = field(default_factory=dict)

    def image_ids(self):
        return sorted(self.annotations)

    def load_image(self, image_id) -> np.ndarray:
        return load_png(self.root / self.file_names[image_id])


def generate_dataset(out_dir, cfg: SceneConfig, count: int,
                     start_id: int = 0) -> Dataset:
    """Render ``count`` scenes into out_dir plus an annotations.json."""
    if count < 1:
        raise ConfigError(f"dataset size {count} must be positive")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    annotations = {}
    file_names = {}
    for k in range(count):
        image_id = start_id + k
        img, ann = generate_scene(cfg, image_id)
        name = f"images/scene_{image_id:05d}.png"
        save_png(out / name, img)
        annotations[image_id] = ann
        file_names[image_id] = name
    write_coco(out / "annotations.json", annotations, file_names)
    return Dataset(root=out, annotations=annotations, file_names=file_names)


def open_dataset(root) -> Dataset:
    root = Path(root)
    ann_path = root / "annotations.json"
    if not ann_path.exists():
        raise FormatError(f"{ann_path}: no annotations.json in dataset")
    annotations, file_names = read_coco(ann_path)
    return Dataset(root=root, annotations=annotations, file_names=file_names)
