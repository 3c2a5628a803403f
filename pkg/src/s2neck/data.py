"""Deterministic synthetic shapes dataset (circle, square, triangle).

On-disk layout::

    manifest.json        DatasetManifest plus per-file SHA-256 checksums
    images/{id}.ppm      binary PPM (P6), 8-bit RGB
    annotations.jsonl    {"image_id", "class", "x", "y", "w", "h"} per line, integers

Image ids ``0 .. n_train - 1`` are the train split, the rest validation.
Every image is rendered from its own stream ``Rng(seed).derive(image_id)``
so the output does not depend on generation order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tensor import Rng, Tensor

FORMAT_VERSION = 1
CLASS_NAMES = ("circle", "square", "triangle")
BUCKETS = ("small", "medium", "large")
SUPERSAMPLE = 4


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class Annotation:
    cls: int
    box: tuple[int, int, int, int]  # x, y, w, h

    @property
    def area(self) -> int:
        return self.box[2] * self.box[3]


@dataclass
class GroundTruthSet:
    image_id: int
    objects: list[Annotation] = field(default_factory=list)


@dataclass
class DatasetManifest:
    image_size: int = 128
    n_train: int = 2000
    n_val: int = 500
    class_names: tuple[str, ...] = CLASS_NAMES
    scale_mix: dict = field(default_factory=lambda: {"small": 0.5, "medium": 0.3, "large": 0.2})
    side_ranges: dict = field(default_factory=lambda: {"small": [5, 7], "medium": [8, 15], "large": [16, 40]})
    objects_per_image: tuple[int, int] = (1, 6)
    bucket_thresholds: tuple[int, int] = (64, 256)
    noise_amplitude: float = 0.06
    seed: int = 0
    version: int = FORMAT_VERSION

    def __post_init__(self):
        total = sum(self.scale_mix.get(b, 0.0) for b in BUCKETS)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"scale mix proportions must sum to 1, got {total}")
        if set(self.scale_mix) - set(BUCKETS):
            raise ValueError(f"unknown buckets in scale mix: {sorted(set(self.scale_mix) - set(BUCKETS))}")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("bad objects_per_image range")
        for b in BUCKETS:
            a, z = self.side_ranges[b]
            if a < 2 or z < a or z > self.image_size:
                raise ValueError(f"bad side range for {b}: {self.side_ranges[b]}")

    @property
    def n_images(self) -> int:
        return self.n_train + self.n_val

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        d["objects_per_image"] = list(self.objects_per_image)
        d["bucket_thresholds"] = list(self.bucket_thresholds)
        return d

    @classmethod
    def from_json(cls, d: dict) -> DatasetManifest:
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("class_names", "objects_per_image", "bucket_thresholds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def bucket_of(area: float, thresholds: Sequence[float] = (64, 256)) -> str:
    if area < thresholds[0]:
        return "small"
    if area < thresholds[1]:
        return "medium"
    return "large"


# -- rendering ------------------------------------------------------------

def _value_noise(rng: Rng, size: int, grid: int = 8) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(3, grid + 1, grid + 1))
    t = np.linspace(0.0, grid, size, endpoint=False)
    i0 = np.floor(t).astype(int)
    f = t - i0
    rows = coarse[:, i0] * (1 - f)[None, :, None] + coarse[:, i0 + 1] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]


def shape_coverage(cls: int, w: int, h: int) -> np.ndarray:
    """Anti-aliased ``h x w`` coverage mask of a shape filling its box."""
    s = SUPERSAMPLE
    ys = (np.arange(h * s) + 0.5) / s
    xs = (np.arange(w * s) + 0.5) / s
    X, Y = np.meshgrid(xs, ys)
    if cls == 0:
        inside = ((X - w / 2) / (w / 2)) ** 2 + ((Y - h / 2) / (h / 2)) ** 2 <= 1.0
    elif cls == 1:
        inside = np.ones_like(X, dtype=bool)
    elif cls == 2:
        # apex at top centre, base along the bottom edge
        inside = np.abs(X - w / 2) <= (w / 2) * (Y / h)
    else:
        raise ValueError(f"unknown class {cls}")
    return inside.reshape(h, s, w, s).mean(axis=(1, 3))


def _pick_color(rng: Rng, background: np.ndarray) -> np.ndarray:
    for _ in range(100):
        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - background).max() >= 0.35:
            return color
    return 1.0 - background


def _sample_bucket(rng: Rng, mix: dict) -> str:
    u = rng.uniform()
    acc = 0.0
    for b in BUCKETS:
        acc += mix.get(b, 0.0)
        if u < acc:
            return b
    return next(b for b in reversed(BUCKETS) if mix.get(b, 0.0) > 0)


def _level_cell(x, y, w, h):
    side = math.sqrt(w * h)
    stride = 8 if side < 8 else 16 if side < 16 else 32
    return stride, int((x + w / 2) // stride), int((y + h / 2) // stride)


def render_image(manifest: DatasetManifest, image_id: int) -> tuple[np.ndarray, GroundTruthSet]:
    """Render one image as ``H x W x 3`` uint8 plus its annotations."""
    rng = Rng(manifest.seed).derive(image_id)
    size = manifest.image_size
    base = rng.uniform(0.2, 0.8, size=3)
    img = base[:, None, None] + manifest.noise_amplitude * _value_noise(rng, size)
    lo, hi = manifest.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    placed: list[tuple[int, int, int, int]] = []
    cells = set()
    gt = GroundTruthSet(image_id)
    for _ in range(n_obj):
        cls = int(rng.integers(0, len(manifest.class_names)))
        a, z = manifest.side_ranges[_sample_bucket(rng, manifest.scale_mix)]
        side = int(rng.integers(a, z + 1))
        w = h = side
        for _attempt in range(50):
            x = int(rng.integers(0, size - w + 1))
            y = int(rng.integers(0, size - h + 1))
            clash = any(x < px + pw + 2 and px < x + w + 2 and y < py + ph + 2 and py < y + h + 2
                        for px, py, pw, ph in placed)
            cell = _level_cell(x, y, w, h)
            if not clash and cell not in cells:
                break
        else:
            continue
        placed.append((x, y, w, h))
        cells.add(cell)
        color = _pick_color(rng, base)
        cov = shape_coverage(cls, w, h)
        region = img[:, y:y + h, x:x + w]
        img[:, y:y + h, x:x + w] = region * (1 - cov) + color[:, None, None] * cov
        gt.objects.append(Annotation(cls, (x, y, w, h)))
    pixels = np.clip(np.round(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    return pixels, gt


# -- file formats -----------------------------------------------------------

def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes()


def decode_ppm(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    try:
        parts = blob.split(maxsplit=4)
        if parts[0] != b"P6":
            raise ValueError("not a P6 file")
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
        if maxval != 255:
            raise ValueError("only 8-bit PPM supported")
        payload = parts[4]
        if len(payload) != w * h * 3:
            raise ValueError(f"payload has {len(payload)} bytes, expected {w * h * 3}")
        return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    except (ValueError, IndexError) as err:
        raise DatasetError(f"{name}: unreadable PPM ({err})") from err


def encode_pgm(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + gray.astype(np.uint8).tobytes()


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def generate_dataset(manifest: DatasetManifest, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    checksums = {}
    lines = []
    for image_id in range(manifest.n_images):
        pixels, gt = render_image(manifest, image_id)
        blob = encode_ppm(pixels)
        (out / "images" / f"{image_id}.ppm").write_bytes(blob)
        checksums[str(image_id)] = _sha256(blob)
        for a in gt.objects:
            x, y, w, h = a.box
            lines.append(json.dumps({"image_id": image_id, "class": a.cls, "x": x, "y": y, "w": w, "h": h},
                                    sort_keys=True))
    ann = ("\n".join(lines) + "\n").encode() if lines else b""
    (out / "annotations.jsonl").write_bytes(ann)
    doc = {"manifest": manifest.to_json(), "checksums": checksums, "annotations_sha256": _sha256(ann)}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out


class Dataset:
    """In-memory split: uint8 images plus annotations."""

    def __init__(self, manifest: DatasetManifest, ids: list[int], pixels: np.ndarray,
                 gts: list[GroundTruthSet]):
        self.manifest = manifest
        self.ids = ids
        self.pixels = pixels  # N x H x W x 3 uint8
        self.gts = gts

    def __len__(self) -> int:
        return len(self.ids)

    def image(self, i: int) -> Tensor:
        return Tensor(self.pixels[i].transpose(2, 0, 1) / 255.0, ("channel", "height", "width"))

    def batch(self, idx: Sequence[int]) -> Tensor:
        return Tensor(self.pixels[list(idx)].transpose(0, 3, 1, 2) / 255.0)

    def __iter__(self) -> Iterator[tuple[Tensor, GroundTruthSet]]:
        for i in range(len(self)):
            yield self.image(i), self.gts[i]

    def subset(self, idx: Sequence[int]) -> Dataset:
        idx = list(idx)
        return Dataset(self.manifest, [self.ids[i] for i in idx], self.pixels[idx], [self.gts[i] for i in idx])


def load_dataset(path: str | Path, split: str = "all") -> Dataset:
    root = Path(path)
    try:
        doc = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as err:
        raise DatasetError(f"{root / 'manifest.json'}: missing manifest") from err
    manifest = DatasetManifest.from_json(doc["manifest"])
    if manifest.version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.version}")
    ids = {"train": range(manifest.n_train), "val": range(manifest.n_train, manifest.n_images),
           "all": range(manifest.n_images)}[split]
    ids = list(ids)

    ann_path = root / "annotations.jsonl"
    ann = ann_path.read_bytes()
    if _sha256(ann) != doc["annotations_sha256"]:
        raise DatasetError(f"{ann_path}: checksum mismatch")
    by_image: dict[int, list[Annotation]] = {}
    size = manifest.image_size
    for line in ann.decode().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        x, y, w, h = rec["x"], rec["y"], rec["w"], rec["h"]
        if w < 2 or h < 2 or x < 0 or y < 0 or x + w > size or y + h > size:
            raise DatasetError(f"{ann_path}: box {rec} out of bounds")
        by_image.setdefault(rec["image_id"], []).append(Annotation(rec["class"], (x, y, w, h)))

    pixels = np.empty((len(ids), size, size, 3), dtype=np.uint8)
    for k, image_id in enumerate(ids):
        f = root / "images" / f"{image_id}.ppm"
        try:
            blob = f.read_bytes()
        except FileNotFoundError as err:
            raise DatasetError(f"{f}: missing image") from err
        if _sha256(blob) != doc["checksums"][str(image_id)]:
            raise DatasetError(f"{f}: checksum mismatch")
        pixels[k] = decode_ppm(blob, str(f))
    gts = [GroundTruthSet(i, by_image.get(i, [])) for i in ids]
    return Dataset(manifest, ids, pixels, gts)
