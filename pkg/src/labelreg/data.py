"""Seeded synthetic segmentation corpus, augmentation, and dataset directories.

Scenes contain part-structured objects (body + appendage of one class), a
"ground" stuff class that co-occurs with a chosen object class, and on the
training split only, a class-specific stripe texture painted on a fraction of
objects. Object colours are drawn independently of class, so shape and context
are the cues that survive to the validation split.

Dataset directories hold ``NNNNNN.ppm`` (P6 RGB) / ``NNNNNN.pgm`` (P5 class
ids, 255 = void) pairs and a ``meta.json``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core.ops import bilinear_matrix
from .errors import ConfigError, DataError

VOID_ID = 255
SPLITS = {"train": 0, "val": 1}
CLASS_NAMES = ("background", "cat", "fish", "house", "tree", "ground")
GROUND = 5


@dataclass
class SyntheticSpec:
    num_classes: int = 6
    resolution: tuple[int, int] = (64, 64)
    # (a, b, p): when class a is in a scene, class b is added with probability p
    co_occurrence: list[tuple[int, int, float]] = field(default_factory=lambda: [(1, GROUND, 1.0)])
    texture_confound: float = 0.8
    # probability that ground appears without being triggered by co-occurrence
    ground_prior: float = 0.2
    max_objects: int = 2
    # blend weight pulling each object's colour toward a class hue (0 = colour carries no class signal)
    color_hint: float = 0.0
    void_border: bool = False
    noise: float = 0.05
    seed: int = 0
    train_size: int = 2000
    val_size: int = 500

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.co_occurrence = [(int(a), int(b), float(p)) for a, b, p in self.co_occurrence]
        self.validate()

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"synthetic data supports 2..{len(CLASS_NAMES)} classes, got {self.num_classes}")
        h, w = self.resolution
        if h < 8 or w < 8:
            raise ConfigError("synthetic resolution must be at least 8x8")
        for a, b, p in self.co_occurrence:
            if not (0 < a < self.num_classes and 0 < b < self.num_classes):
                raise ConfigError(f"co-occurrence pair ({a}, {b}) references a class outside 1..{self.num_classes - 1}")
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"co-occurrence probability {p} outside [0, 1]")
        for name in ("texture_confound", "ground_prior", "color_hint"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.max_objects < 1:
            raise ConfigError("max_objects must be >= 1")
        if self.train_size < 0 or self.val_size < 0:
            raise ConfigError("split sizes must be non-negative")

    @property
    def object_classes(self) -> list[int]:
        return [c for c in range(1, self.num_classes) if c != GROUND]

    def split_size(self, split: str) -> int:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {sorted(SPLITS)}")
        return self.train_size if split == "train" else self.val_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["co_occurrence"] = [list(t) for t in self.co_occurrence]
        return d


@dataclass
class Sample:
    image: np.ndarray  # (3, h, w) float32 in [0, 1]
    label: np.ndarray  # (h, w) uint8, 255 = void
    textured: tuple[int, ...] = ()  # classes painted with their confound texture

    def __post_init__(self):
        if self.image.shape[1:] != self.label.shape:
            raise DataError(f"image {self.image.shape} and label {self.label.shape} spatial dims differ")


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _rect(yy, xx, y0, y1, x0, x1):
    return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)


def _triangle(yy, xx, pts):
    (y0, x0), (y1, x1), (y2, x2) = pts

    def side(ya, xa, yb, xb):
        return (xx - xa) * (yb - ya) - (yy - ya) * (xb - xa)

    d = (side(y0, x0, y1, x1), side(y1, x1, y2, x2), side(y2, x2, y0, x0))
    neg = (d[0] < 0) | (d[1] < 0) | (d[2] < 0)
    pos = (d[0] > 0) | (d[1] > 0) | (d[2] > 0)
    return ~(neg & pos)


def _object_mask(cls: int, yy, xx, cy, cx, s, flip: bool) -> np.ndarray:
    """Body and appendage of a class template, unioned."""
    f = -1.0 if flip else 1.0
    if cls == 1:  # cat: ellipse body, two ears
        body = _ellipse(yy, xx, cy, cx, 0.3 * s, 0.45 * s)
        ear1 = _triangle(yy, xx, [(cy - 0.2 * s, cx - 0.35 * s), (cy - 0.2 * s, cx - 0.1 * s), (cy - 0.55 * s, cx - 0.28 * s)])
        ear2 = _triangle(yy, xx, [(cy - 0.2 * s, cx + 0.1 * s), (cy - 0.2 * s, cx + 0.35 * s), (cy - 0.55 * s, cx + 0.28 * s)])
        return body | ear1 | ear2
    if cls == 2:  # fish: ellipse body, tail
        body = _ellipse(yy, xx, cy, cx, 0.22 * s, 0.4 * s)
        tail = _triangle(yy, xx, [(cy, cx - f * 0.3 * s), (cy - 0.3 * s, cx - f * 0.65 * s), (cy + 0.3 * s, cx - f * 0.65 * s)])
        return body | tail
    if cls == 3:  # house: square, roof
        body = _rect(yy, xx, cy - 0.1 * s, cy + 0.4 * s, cx - 0.35 * s, cx + 0.35 * s)
        roof = _triangle(yy, xx, [(cy - 0.1 * s, cx - 0.48 * s), (cy - 0.1 * s, cx + 0.48 * s), (cy - 0.55 * s, cx)])
        return body | roof
    if cls == 4:  # tree: canopy, trunk
        canopy = _ellipse(yy, xx, cy - 0.15 * s, cx, 0.32 * s, 0.32 * s)
        trunk = _rect(yy, xx, cy + 0.1 * s, cy + 0.55 * s, cx - 0.08 * s, cx + 0.08 * s)
        return canopy | trunk
    raise ConfigError(f"no object template for class {cls}")


_CLASS_HUES = np.array([
    [0.5, 0.5, 0.5],
    [0.85, 0.35, 0.2],
    [0.2, 0.45, 0.85],
    [0.8, 0.75, 0.2],
    [0.35, 0.8, 0.45],
    [0.2, 0.6, 0.2],
])


def _stripes(yy, xx, angle: float, period: float) -> np.ndarray:
    t = math.cos(angle) * xx + math.sin(angle) * yy
    return (np.floor(t / period) % 2).astype(np.float64)


def _boundary(label: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of a different class."""
    edge = np.zeros(label.shape, dtype=bool)
    diff_v = label[1:, :] != label[:-1, :]
    diff_h = label[:, 1:] != label[:, :-1]
    edge[1:, :] |= diff_v
    edge[:-1, :] |= diff_v
    edge[:, 1:] |= diff_h
    edge[:, :-1] |= diff_h
    return edge


def generate_synthetic(spec: SyntheticSpec, split: str, index: int) -> Sample:
    """Pure function of (spec, split, index)."""
    n = spec.split_size(split)
    if not 0 <= index < n:
        raise ConfigError(f"index {index} outside {split} split of size {n}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, SPLITS[split], index]))
    h, w = spec.resolution
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w

    base = rng.uniform(0.2, 0.8, 3)
    tilt = rng.uniform(-0.15, 0.15, 3)
    image = base[:, None, None] + tilt[:, None, None] * (yy[None] - 0.5)
    label = np.zeros((h, w), dtype=np.uint8)

    candidates = spec.object_classes
    present: list[int] = []
    if candidates:
        count = int(rng.integers(1, min(spec.max_objects, len(candidates)) + 1))
        present = [int(c) for c in rng.choice(candidates, size=count, replace=False)]
    for a, b, p in spec.co_occurrence:
        draw = rng.random()
        if a in present and b not in present and draw < p:
            present.append(b)
    has_ground = GROUND < spec.num_classes and (GROUND in present or rng.random() < spec.ground_prior)
    objects = [c for c in present if c != GROUND]

    if has_ground:
        top = rng.uniform(0.65, 0.8)
        amp = rng.uniform(0.01, 0.04)
        phase = rng.uniform(0.0, 2 * np.pi)
        band = yy >= top + amp * np.sin(4 * np.pi * xx + phase)
        colour = (1 - spec.color_hint) * (_CLASS_HUES[GROUND] + rng.uniform(-0.15, 0.15, 3)) \
            + spec.color_hint * _CLASS_HUES[GROUND]
        image = np.where(band[None], colour[:, None, None], image)
        label[band] = GROUND

    textured = []
    for c in objects:
        s = rng.uniform(0.45, 0.65)
        cy = rng.uniform(0.3, 0.6)
        cx = rng.uniform(0.25, 0.75)
        mask = _object_mask(c, yy, xx, cy, cx, s, bool(rng.random() < 0.5))
        colour = (1 - spec.color_hint) * rng.uniform(0.05, 0.95, 3) + spec.color_hint * _CLASS_HUES[c]
        fill = np.broadcast_to(colour[:, None, None], (3, h, w))
        draw = rng.random()
        if split == "train" and draw < spec.texture_confound:
            tex = _stripes(yy, xx, np.pi * (c - 1) / 4, 0.12)
            fill = fill * (0.55 + 0.45 * tex[None])
            textured.append(c)
        image = np.where(mask[None], fill, image)
        label[mask] = c

    image = image + rng.normal(0.0, spec.noise, image.shape)
    # 8-bit levels: exact file round trips and platform-independent digests
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.float32) / np.float32(255.0)
    if spec.void_border:
        label[_boundary(label)] = VOID_ID
    return Sample(image, label, tuple(textured))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    scale: tuple[float, float] = (0.08, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    output: tuple[int, int] | None = None
    flip_prob: float = 0.5

    def __post_init__(self):
        self.scale = tuple(float(v) for v in self.scale)
        self.ratio = tuple(float(v) for v in self.ratio)
        if self.output is not None:
            self.output = tuple(int(v) for v in self.output)
        if not 0 < self.scale[0] <= self.scale[1] <= 1:
            raise ConfigError(f"crop scale range {self.scale} must satisfy 0 < lo <= hi <= 1")
        if not 0 < self.ratio[0] <= self.ratio[1]:
            raise ConfigError(f"aspect range {self.ratio} must satisfy 0 < lo <= hi")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")


def sample_crop(rng: np.random.Generator, h: int, w: int, cfg: AugmentConfig) -> tuple[int, int, int, int]:
    """(top, left, height, width) of a random-area, random-aspect crop.

    Up to 10 draws; if none fits, the largest centred crop whose aspect is
    clamped into range.
    """
    area = h * w
    log_lo, log_hi = math.log(cfg.ratio[0]), math.log(cfg.ratio[1])
    for _ in range(10):
        target = area * rng.uniform(cfg.scale[0], cfg.scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < cfg.ratio[0]:
        cw, ch = w, int(round(w / cfg.ratio[0]))
    elif in_ratio > cfg.ratio[1]:
        ch, cw = h, int(round(h * cfg.ratio[1]))
    else:
        ch, cw = h, w
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _nearest_index(size_out: int, size_in: int) -> np.ndarray:
    src = np.floor((np.arange(size_out) + 0.5) * size_in / size_out).astype(np.int64)
    return np.minimum(src, size_in - 1)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    ah = bilinear_matrix(size[0], image.shape[1])
    aw = bilinear_matrix(size[1], image.shape[2])
    return (ah @ image.astype(np.float64) @ aw.T).astype(np.float32)


def resize_label(label: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    rows = _nearest_index(size[0], label.shape[0])
    cols = _nearest_index(size[1], label.shape[1])
    return label[rows][:, cols]


def random_resized_crop_flip(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig) -> Sample:
    """Random crop resized to ``cfg.output``; image bilinear, label nearest."""
    _, h, w = sample.image.shape
    out = cfg.output or (h, w)
    top, left, ch, cw = sample_crop(rng, h, w, cfg)
    flip = rng.random() < cfg.flip_prob
    image = resize_image(sample.image[:, top:top + ch, left:left + cw], out)
    label = resize_label(sample.label[top:top + ch, left:left + cw], out)
    if flip:
        image = image[:, :, ::-1]
        label = label[:, ::-1]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(label), sample.textured)


# ---------------------------------------------------------------------------
# materialised datasets and directory I/O
# ---------------------------------------------------------------------------


@dataclass
class SegDataset:
    images: np.ndarray  # (n, 3, h, w) float32
    labels: np.ndarray  # (n, h, w) uint8
    num_classes: int
    split: str = "train"
    textured: list[tuple[int, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        tex = self.textured[i] if self.textured else ()
        return Sample(self.images[i], self.labels[i], tex)

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.labels.shape[1:])

    def subset(self, n: int) -> "SegDataset":
        return SegDataset(self.images[:n], self.labels[:n], self.num_classes, self.split,
                          self.textured[:n] if self.textured else [])


def synthetic_dataset(spec: SyntheticSpec, split: str, size: int | None = None) -> SegDataset:
    n = spec.split_size(split) if size is None else min(size, spec.split_size(split))
    if n == 0:
        raise DataError(f"{split} split is empty")
    samples = [generate_synthetic(spec, split, i) for i in range(n)]
    return SegDataset(np.stack([s.image for s in samples]), np.stack([s.label for s in samples]),
                      spec.num_classes, split, [s.textured for s in samples])


def _write_pnm(path: Path, magic: bytes, array: np.ndarray) -> None:
    h, w = array.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(array, dtype=np.uint8).tobytes())


_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pnm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    raw = path.read_bytes()
    tokens = []
    pos = 0
    for _ in range(4):
        m = _HEADER_TOKEN.match(raw, pos)
        if m is None:
            raise DataError(f"malformed header in {path}")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != magic:
        raise DataError(f"{path} is not a {magic.decode()} file (found {tokens[0][:2]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"malformed header in {path}") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise DataError(f"unsupported header in {path}: {w}x{h}, maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * channels
    body = raw[pos:pos + need]
    if len(body) != need:
        raise DataError(f"truncated pixel data in {path}: expected {need} bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def write_sample(sample: Sample, directory: str | Path, index: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgb = np.round(np.clip(sample.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    _write_pnm(directory / f"{index:06d}.ppm", b"P6", rgb)
    _write_pnm(directory / f"{index:06d}.pgm", b"P5", sample.label.astype(np.uint8))


def write_dataset_dir(dataset: SegDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        write_sample(dataset[i], directory, i)
    meta = {"num_classes": dataset.num_classes, "resolution": list(dataset.resolution), "split": dataset.split}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_dataset_dir(path: str | Path) -> SegDataset:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no samples: {path} has no meta.json")
    try:
        meta = json.loads(meta_path.read_text())
        num_classes = int(meta["num_classes"])
        split = str(meta.get("split", "train"))
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed meta.json in {path}: {exc}") from None
    stems = sorted({p.stem for p in path.iterdir() if p.suffix in (".ppm", ".pgm")})
    if not stems:
        raise DataError(f"no samples in {path}")
    images, labels = [], []
    for stem in stems:
        ppm, pgm = path / f"{stem}.ppm", path / f"{stem}.pgm"
        if not ppm.exists() or not pgm.exists():
            raise DataError(f"missing pair for sample {stem} in {path}")
        rgb = _read_pnm(ppm, b"P6", 3)
        lab = _read_pnm(pgm, b"P5", 1)
        if rgb.shape[:2] != lab.shape:
            raise DataError(f"image/label size mismatch for sample {stem}")
        bad = (lab >= num_classes) & (lab != VOID_ID)
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise DataError(f"label id {lab[y, x]} at ({y}, {x}) in {pgm.name} outside 0..{num_classes - 1} and not void")
        images.append(rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))
        labels.append(lab.copy())
    shapes = {l.shape for l in labels}
    if len(shapes) != 1:
        raise DataError(f"samples in {path} have differing sizes {sorted(shapes)}")
    return SegDataset(np.stack(images), np.stack(labels), num_classes, split)
