"""Datasets, image codecs, synthetic shapes and the detections interchange file."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import Detection, GroundTruth

SHAPE_CLASSES = ("rectangle", "circle", "triangle")


class DatasetError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass
class AnnotatedSample:
    image: np.ndarray  # [H, W, 3] float64 in [0, 1]
    image_id: int | str
    gts: list[GroundTruth] = field(default_factory=list)

    def targets(self) -> tuple[np.ndarray, np.ndarray]:
        cls = np.array([g.class_id for g in self.gts], dtype=int)
        boxes = np.array([g.box for g in self.gts], dtype=np.float64).reshape(-1, 4)
        return cls, boxes


@dataclass
class DatasetManifest:
    name: str
    num_samples: int
    class_names: list[str]
    source: str  # "coco-json" | "synthetic"
    seed: int | None = None
    category_map: dict[str, int] = field(default_factory=dict)  # original category id -> dense id
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**d)


# ---------------------------------------------------------------------------
# image codecs
# ---------------------------------------------------------------------------
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if not m:
            raise ImageFormatError(f"{path}: malformed PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PPM header") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 256:
        raise ImageFormatError(f"{path}: unsupported PPM geometry {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    need = width * height * 3
    data = raw[pos:pos + need]
    if len(data) < need:
        raise ImageFormatError(f"{path}: truncated payload ({len(data)} of {need} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / maxval


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = _to_bytes(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected [H,W,3] image, got {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return read_ppm(path)


def write_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        PILImage.fromarray(_to_bytes(image)).save(path)
        return
    write_ppm(path, image)


# ---------------------------------------------------------------------------
# COCO annotations
# ---------------------------------------------------------------------------
def load_coco_annotations(annotation_file: str | Path, image_dir: str | Path | None = None
                          ) -> tuple[list[AnnotatedSample], DatasetManifest]:
    """Load the images/annotations/categories subset of a COCO detection file.

    Pixel ``[x, y, w, h]`` boxes become normalised ``(cx, cy, w, h)``;
    category ids are remapped densely in ascending order of the original id.
    """
    annotation_file = Path(annotation_file)
    if not annotation_file.exists():
        raise DatasetError(f"annotation file not found: {annotation_file}")
    image_dir = Path(image_dir) if image_dir is not None else annotation_file.parent
    try:
        doc = json.loads(annotation_file.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{annotation_file}: invalid JSON ({e})") from None
    cats = sorted(doc.get("categories", []), key=lambda c: c["id"])
    cat_map = {str(c["id"]): i for i, c in enumerate(cats)}
    names = [c.get("name", str(c["id"])) for c in cats]

    images = {}
    for k, rec in enumerate(doc.get("images", [])):
        try:
            images[rec["id"]] = (rec["file_name"], int(rec["width"]), int(rec["height"]))
        except (KeyError, TypeError, ValueError):
            raise DatasetError(f"{annotation_file}: malformed image record at index {k}") from None

    gts: dict = {i: [] for i in images}
    for k, ann in enumerate(doc.get("annotations", [])):
        try:
            img_id = ann["image_id"]
            x, y, w, h = (float(v) for v in ann["bbox"])
            cid = cat_map[str(ann["category_id"])]
            _, W, H = images[img_id]
        except (KeyError, TypeError, ValueError):
            raise DatasetError(f"{annotation_file}: malformed annotation at index {k}") from None
        box = (np.clip((x + w / 2) / W, 0, 1), np.clip((y + h / 2) / H, 0, 1), np.clip(w / W, 0, 1), np.clip(h / H, 0, 1))
        g = GroundTruth(img_id, cid, tuple(float(v) for v in box))
        try:
            g.validate(f"annotation {k}")
        except ValueError as e:
            raise DatasetError(str(e)) from None
        gts[img_id].append(g)

    samples = []
    for img_id, (fname, W, H) in images.items():
        path = image_dir / fname
        if not path.exists():
            raise DatasetError(f"missing image file: {path}")
        img = read_image(path)
        if img.shape[:2] != (H, W):
            raise DatasetError(f"{path}: size {img.shape[1]}x{img.shape[0]} disagrees with annotation {W}x{H}")
        samples.append(AnnotatedSample(img, img_id, gts[img_id]))
    manifest = DatasetManifest(annotation_file.stem, len(samples), names, "coco-json", None, cat_map)
    return samples, manifest


def save_dataset(samples: Sequence[AnnotatedSample], manifest: DatasetManifest, directory: str | Path) -> Path:
    """Write PPM images, ``annotations.json`` (COCO) and ``dataset.json``."""
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    images, anns = [], []
    for s in samples:
        H, W, _ = s.image.shape
        fname = f"images/{s.image_id}.ppm"
        write_ppm(d / fname, s.image)
        images.append({"id": s.image_id, "file_name": fname, "width": W, "height": H})
        for g in s.gts:
            cx, cy, w, h = g.box
            anns.append({"id": len(anns) + 1, "image_id": s.image_id, "category_id": g.class_id,
                         "bbox": [(cx - w / 2) * W, (cy - h / 2) * H, w * W, h * H], "iscrowd": 0})
    cats = [{"id": i, "name": n} for i, n in enumerate(manifest.class_names)]
    (d / "annotations.json").write_text(json.dumps({"images": images, "annotations": anns, "categories": cats}))
    (d / "dataset.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return d


def load_dataset(directory: str | Path) -> tuple[list[AnnotatedSample], DatasetManifest]:
    d = Path(directory)
    if d.is_file():
        return load_coco_annotations(d)
    if not d.exists():
        raise DatasetError(f"dataset path not found: {d}")
    samples, manifest = load_coco_annotations(d / "annotations.json", d)
    mpath = d / "dataset.json"
    if mpath.exists():
        stored = DatasetManifest.from_dict(json.loads(mpath.read_text()))
        stored.num_samples = len(samples)
        manifest = stored
    return samples, manifest


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------
def _shape_mask(kind: str, x0: int, y0: int, w: int, h: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    px, py = xx + 0.5, yy + 0.5
    if kind == "rectangle":
        return (px >= x0) & (px < x0 + w) & (py >= y0) & (py < y0 + h)
    if kind == "circle":
        r = min(w, h) / 2.0
        return (px - (x0 + w / 2.0)) ** 2 + (py - (y0 + h / 2.0)) ** 2 <= r * r
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        t = (py - y0) / h
        half = t * w / 2.0
        cx = x0 + w / 2.0
        return (t >= 0) & (t <= 1) & (np.abs(px - cx) <= half)
    raise ValueError(f"unknown shape {kind!r}")


def _distinct_color(rng: np.random.Generator, avoid: Sequence[np.ndarray], min_dist: float = 0.45) -> np.ndarray:
    for _ in range(1000):
        c = rng.uniform(0.0, 1.0, 3)
        if all(np.linalg.norm(c - a) >= min_dist for a in avoid):
            return c
    raise RuntimeError("could not draw a distinct colour")


def generate_synthetic_shapes(n: int, classes: Sequence[str] = SHAPE_CLASSES, max_objects: int = 3,
                              image_size: int = 128, seed: int = 0,
                              size_range: tuple[float, float] = (0.18, 0.45)) -> list[AnnotatedSample]:
    """Seeded images of rectangles, circles and triangles on a two-colour gradient.

    Objects never overlap; every ground-truth box is the tight pixel extent
    of its rendered shape. Sample ``i`` depends only on ``(seed, i)``.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    classes = list(classes)
    for c in classes:
        if c not in SHAPE_CLASSES:
            raise ValueError(f"unknown shape class {c!r}")
    S = image_size
    lo, hi = max(4, int(size_range[0] * S)), max(5, int(size_range[1] * S))
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        top = rng.uniform(0.0, 1.0, 3)
        bottom = np.clip(top + rng.uniform(-0.15, 0.15, 3), 0, 1)
        ramp = np.linspace(0.0, 1.0, S)[:, None, None]
        img = np.broadcast_to(top * (1 - ramp) + bottom * ramp, (S, S, 3)).copy()
        bg = [top, bottom]
        k = int(rng.integers(1, max_objects + 1))
        placed: list[tuple[int, int, int, int]] = []
        gts = []
        for _ in range(k):
            for _attempt in range(100):
                cls = int(rng.integers(len(classes)))
                w, h = (int(v) for v in rng.integers(lo, hi + 1, 2))
                if classes[cls] == "circle":
                    h = w
                x0 = int(rng.integers(0, S - w + 1))
                y0 = int(rng.integers(0, S - h + 1))
                if all(x0 + w + 2 <= a or a + c + 2 <= x0 or y0 + h + 2 <= b or b + d + 2 <= y0
                       for a, b, c, d in placed):
                    break
            else:
                continue
            placed.append((x0, y0, w, h))
            mask = _shape_mask(classes[cls], x0, y0, w, h, S)
            img[mask] = _distinct_color(rng, bg)
            ys, xs = np.nonzero(mask)
            bx0, bx1, by0, by1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
            box = ((bx0 + bx1) / 2 / S, (by0 + by1) / 2 / S, (bx1 - bx0) / S, (by1 - by0) / S)
            gts.append(GroundTruth(i, cls, tuple(float(v) for v in box)))
        out.append(AnnotatedSample(img, i, gts))
    return out


def synthetic_manifest(n: int, seed: int, image_size: int = 128, max_objects: int = 3,
                       classes: Sequence[str] = SHAPE_CLASSES) -> DatasetManifest:
    return DatasetManifest("synthetic-shapes", n, list(classes), "synthetic", seed,
                           params={"image_size": image_size, "max_objects": max_objects})


def train_test_split(samples: Sequence[AnnotatedSample], train_fraction: float = 0.8
                     ) -> tuple[list[AnnotatedSample], list[AnnotatedSample]]:
    """Deterministic split by sample index: the first ``train_fraction`` go to training."""
    cut = int(round(len(samples) * train_fraction))
    return list(samples[:cut]), list(samples[cut:])


# ---------------------------------------------------------------------------
# detections interchange
# ---------------------------------------------------------------------------
def export_detections(detections: Sequence[Detection], path: str | Path) -> None:
    Path(path).write_text(json.dumps([d.to_dict() for d in detections], indent=1))


def import_external_detections(path: str | Path) -> list[Detection]:
    """Read a detections JSON list ``[{image_id, class_id, score, bbox, query_id?}]``."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DatasetError(f"detections file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, list):
        raise DatasetError(f"{path}: top level must be a list of detection records")
    dets = []
    for k, rec in enumerate(doc):
        where = f"{path}: record {k}"
        try:
            qid = rec.get("query_id")
            d = Detection(rec["image_id"], int(rec["class_id"]), float(rec["score"]),
                          tuple(float(v) for v in rec["bbox"]), None if qid is None else int(qid))
            if len(d.box) != 4:
                raise ValueError(f"{where}: bbox must have 4 values")
            d.validate(where)
        except (KeyError, TypeError, AttributeError) as e:
            raise DatasetError(f"{where}: schema violation ({e!r})") from None
        except ValueError as e:
            raise DatasetError(str(e)) from None
        dets.append(d)
    return dets
