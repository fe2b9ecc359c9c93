"""Dataset ingestion and Trojan trigger injection.

Covers IDX (MNIST-format) reading/writing, two synthetic generators used
as desk-scale stand-ins for real image datasets, and the poisoning
machinery: trigger specs, patch stamping and training-set injection.
Images are float32 NHWC arrays with values in [0, 1].
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MAX_PATCH_AREA_FRACTION = 0.03  # triggers must stay small relative to the image

ATTACK_MODES = ("single-target", "all-to-one", "all-to-all")
RANDOM_LOCATION = "random-per-image"


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """Images (N,H,W,C) in [0,1] with integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (N,H,W,C), got {self.images.shape}")
        if len(self.images) != len(self.labels) or len(self.labels) == 0:
            raise ConfigError("images and labels must be equal-length and non-empty")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ConfigError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError("labels out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices, split=None) -> "LabeledDataset":
        return LabeledDataset(self.images[indices], self.labels[indices],
                              self.num_classes, self.split if split is None else split)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


def _read_exact(fh, n, what, offset):
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated IDX file: expected {what} at byte {offset}")
    return raw


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read a standard IDX image/label file pair; pixels scaled by 1/255."""
    with open(images_path, "rb") as fh:
        magic = struct.unpack(">I", _read_exact(fh, 4, "images magic", 0))[0]
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"bad images magic 0x{magic:08x} at byte 0 in {images_path}")
        n, h, w = struct.unpack(">III", _read_exact(fh, 12, "image dims", 4))
        raw = fh.read()
    if len(raw) != n * h * w:
        raise FormatError(
            f"image payload is {len(raw)} bytes, header promises {n * h * w}"
            f" (from byte 16)")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, 1)

    with open(labels_path, "rb") as fh:
        magic = struct.unpack(">I", _read_exact(fh, 4, "labels magic", 0))[0]
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"bad labels magic 0x{magic:08x} at byte 0 in {labels_path}")
        (ln,) = struct.unpack(">I", _read_exact(fh, 4, "label count", 4))
        lraw = fh.read()
    if len(lraw) != ln:
        raise FormatError(f"label payload is {len(lraw)} bytes, header promises {ln}")
    if ln != n:
        raise FormatError(f"count mismatch: {n} images vs {ln} labels")
    labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)

    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return LabeledDataset(images.astype(np.float32) / 255.0, labels, k)


def save_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Write an IDX pair; pixels are quantized back to bytes via round(p*255)."""
    if dataset.image_shape[2] != 1:
        raise ConfigError("IDX files hold single-channel images only")
    n, h, w, _ = dataset.images.shape
    pixels = np.rint(dataset.images[:, :, :, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

# 5x7 digit bitmaps; rows top to bottom, one 5-bit string per row
_GLYPH_FONT = (
    "01110 10001 10011 10101 11001 10001 01110",
    "00100 01100 00100 00100 00100 00100 01110",
    "01110 10001 00001 00010 00100 01000 11111",
    "11111 00010 00100 00010 00001 10001 01110",
    "00010 00110 01010 10010 11111 00010 00010",
    "11111 10000 11110 00001 00001 10001 01110",
    "00110 01000 10000 11110 10001 10001 01110",
    "11111 00001 00010 00100 01000 01000 01000",
    "01110 10001 10001 01110 10001 10001 01110",
    "01110 10001 10001 01111 00001 00010 01100",
)
_GLYPH_MASKS = tuple(
    np.array([[int(b) for b in row] for row in rows.split()], dtype=np.float32)
    for rows in _GLYPH_FONT
)


def _blob_centers(h, w, k):
    # class identity = bump position on a fixed ring; independent of the seed
    # so differently-seeded train/test splits share the same class structure
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = h * 0.30, w * 0.30
    ang = 2.0 * np.pi * np.arange(k) / k
    return np.stack([cy + ry * np.sin(ang), cx + rx * np.cos(ang)], axis=1)


def _stripe_angles(k):
    return np.pi * np.arange(k) / k


def gen_synthetic(kind: str, n: int, h: int, w: int, c: int, k: int,
                  seed: int, split: str = "") -> LabeledDataset:
    """Deterministic synthetic dataset; classes balanced within +-1.

    ``blobs``: one Gaussian bump per class at a class-specific position,
    with jittered center, size and amplitude. ``stripes``: oriented
    sinusoidal gratings, one orientation per class, small phase jitter so
    the classes stay linearly separable. ``glyphs``: digit-like bitmap
    characters rendered near the image center over a black background
    (the handwriting-scan stand-in: borders are almost always dark),
    K <= 10.
    """
    if kind not in ("blobs", "stripes", "glyphs"):
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    if n < k:
        raise ConfigError(f"need at least {k} samples for {k} classes")
    if c not in (1, 3):
        raise ConfigError("channels must be 1 or 3")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k).astype(np.int64)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    images = np.empty((n, h, w, c), dtype=np.float32)

    if kind == "blobs":
        centers = _blob_centers(h, w, k)
        jitter = rng.uniform(-2.0, 2.0, size=(n, 2))
        sigma = rng.uniform(2.2, 3.2, size=n)
        amp = rng.uniform(0.7, 1.0, size=n)
        noise = rng.normal(0.0, 0.05, size=(n, h, w)).astype(np.float32)
        for i in range(n):
            cy, cx = centers[labels[i]] + jitter[i]
            r2 = (yy - cy) ** 2 + (xx - cx) ** 2
            plane = amp[i] * np.exp(-r2 / (2.0 * sigma[i] ** 2)) + noise[i]
            images[i] = np.clip(plane, 0.0, 1.0)[:, :, None]
    elif kind == "stripes":
        angles = _stripe_angles(k)
        period = rng.uniform(5.0, 7.0, size=n)
        phase = rng.uniform(-0.3, 0.3, size=n)
        amp = rng.uniform(0.8, 1.0, size=n)
        noise = rng.normal(0.0, 0.06, size=(n, h, w)).astype(np.float32)
        for i in range(n):
            t = angles[labels[i]]
            proj = xx * np.cos(t) + yy * np.sin(t)
            plane = 0.5 + 0.5 * amp[i] * np.sin(2.0 * np.pi * proj / period[i] + phase[i])
            images[i] = np.clip(plane + noise[i], 0.0, 1.0)[:, :, None]
    else:
        if k > 10:
            raise ConfigError("glyphs supports at most 10 classes")
        scale = max(1, min((h - 5) // 7, (w - 5) // 5))
        glyphs = [np.repeat(np.repeat(m, scale, 0), scale, 1) for m in _GLYPH_MASKS[:k]]
        gh, gw = glyphs[0].shape
        if gh > h or gw > w:
            raise ConfigError(f"image {h}x{w} too small for glyphs")
        r0, c0 = (h - gh) // 2, (w - gw) // 2
        jit = min(2, r0, c0, h - gh - r0, w - gw - c0)
        noise = rng.normal(0.0, 0.03, size=(n, h, w)).astype(np.float32)
        for i in range(n):
            m = glyphs[labels[i]]
            r = r0 + int(rng.integers(-jit, jit + 1))
            col = c0 + int(rng.integers(-jit, jit + 1))
            stroke = m * rng.uniform(0.6, 1.0) * rng.uniform(0.75, 1.0, size=m.shape)
            plane = np.zeros((h, w), dtype=np.float32)
            plane[r:r + gh, col:col + gw] = stroke
            images[i] = np.clip(plane + noise[i], 0.0, 1.0)[:, :, None]

    if c == 3 and images.shape[3] == 1:
        images = np.repeat(images, 3, axis=3)
    return LabeledDataset(images, labels, k, split)


# ---------------------------------------------------------------------------
# Triggers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriggerSpec:
    """One poisoning strategy: patch pattern, placement, relabeling rule.

    ``target_label`` is a class index for single-target / all-to-one and a
    length-K permutation (tuple) for all-to-all. ``location`` is a fixed
    (row, col) or "random-per-image". Patch area above 3% of the image
    needs ``area_override`` (as does a degenerate zero-area patch).
    """

    pattern: np.ndarray  # (h, w, C) float32 in [0, 1]
    location: object
    target_label: object
    attack_mode: str
    poison_fraction: float
    source_label: object = "any"
    area_override: bool = False

    def __post_init__(self):
        object.__setattr__(self, "pattern",
                           np.asarray(self.pattern, dtype=np.float32))
        if self.pattern.ndim != 3:
            raise ConfigError(f"pattern must be (h, w, C), got {self.pattern.shape}")
        if self.pattern.size and (self.pattern.min() < 0 or self.pattern.max() > 1):
            raise ConfigError("pattern values must lie in [0, 1]")
        if self.attack_mode not in ATTACK_MODES:
            raise ConfigError(f"unknown attack_mode {self.attack_mode!r}")
        if not (0.0 < self.poison_fraction <= 1.0):
            raise ConfigError("poison_fraction must be in (0, 1]")
        if isinstance(self.target_label, (list, np.ndarray)):
            object.__setattr__(self, "target_label", tuple(int(t) for t in self.target_label))

    @property
    def patch_shape(self):
        return tuple(self.pattern.shape[:2])

    def validate_for(self, h: int, w: int, c: int, k: int) -> None:
        ph, pw, pc = self.pattern.shape
        if pc != c:
            raise ConfigError(f"pattern has {pc} channels, images have {c}")
        area = ph * pw
        if not self.area_override:
            if area == 0:
                raise ConfigError("zero-area patch requires area_override")
            if area > MAX_PATCH_AREA_FRACTION * h * w:
                raise ConfigError(
                    f"patch area {area} exceeds {MAX_PATCH_AREA_FRACTION:.0%} of "
                    f"{h}x{w} image (set area_override to allow)")
        if self.location != RANDOM_LOCATION:
            r, col = self.location
            if r < 0 or col < 0 or r + ph > h or col + pw > w:
                raise ConfigError(
                    f"patch {ph}x{pw} at {(r, col)} falls outside {h}x{w} image")
        elif ph > h or pw > w:
            raise ConfigError(f"patch {ph}x{pw} larger than {h}x{w} image")
        if self.attack_mode == "all-to-all":
            if not (isinstance(self.target_label, tuple) and len(self.target_label) == k
                    and sorted(self.target_label) == list(range(k))):
                raise ConfigError("all-to-all needs a length-K permutation target_label")
        else:
            if not isinstance(self.target_label, int) or not (0 <= self.target_label < k):
                raise ConfigError("target_label must be a class index")
        if self.attack_mode == "single-target":
            if not isinstance(self.source_label, int):
                raise ConfigError("single-target requires an integer source_label")
            if self.source_label == self.target_label:
                raise ConfigError("source and target class must differ")

    def trigger_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.pattern).tobytes())
        h.update(repr((self.location, self.target_label, self.attack_mode,
                       self.source_label)).encode())
        return h.hexdigest()

    def to_json(self, include_pattern: bool = True) -> dict:
        obj = {
            "location": list(self.location) if self.location != RANDOM_LOCATION
            else RANDOM_LOCATION,
            "target_label": list(self.target_label)
            if isinstance(self.target_label, tuple) else self.target_label,
            "attack_mode": self.attack_mode,
            "poison_fraction": self.poison_fraction,
            "source_label": self.source_label,
            "area_override": self.area_override,
            "pattern_shape": list(self.pattern.shape),
            "trigger_hash": self.trigger_hash(),
        }
        if include_pattern:
            obj["pattern"] = np.asarray(self.pattern, dtype=np.float64).tolist()
        return obj

    @staticmethod
    def from_json(obj: dict, pattern: np.ndarray | None = None) -> "TriggerSpec":
        if pattern is None:
            if "pattern" not in obj:
                raise ConfigError("trigger JSON carries no pattern and none was supplied")
            pattern = np.asarray(obj["pattern"], dtype=np.float32)
        loc = obj["location"]
        return TriggerSpec(
            pattern=pattern,
            location=RANDOM_LOCATION if loc == RANDOM_LOCATION else tuple(loc),
            target_label=obj["target_label"],
            attack_mode=obj["attack_mode"],
            poison_fraction=float(obj["poison_fraction"]),
            source_label=obj.get("source_label", "any"),
            area_override=bool(obj.get("area_override", False)),
        )


@dataclass
class PoisonReport:
    num_poisoned: int
    per_class_counts: dict
    trigger_hash: str
    bounding_boxes: list  # (row, col, h, w) per poisoned image

    def to_json(self) -> dict:
        return {
            "num_poisoned": self.num_poisoned,
            "per_class_counts": {str(k): v for k, v in self.per_class_counts.items()},
            "trigger_hash": self.trigger_hash,
            "bounding_boxes": [list(b) for b in self.bounding_boxes],
        }


def stamp(image: np.ndarray, spec: TriggerSpec, location=None) -> np.ndarray:
    """Return a copy of ``image`` with the patch written at ``location``.

    Pure; only the patch region can differ from the input. ``location``
    defaults to the spec's own fixed location and is required when the
    spec places patches randomly per image.
    """
    image = np.asarray(image)
    h, w, c = image.shape
    ph, pw, _ = spec.pattern.shape
    if location is None:
        if spec.location == RANDOM_LOCATION:
            raise ConfigError("spec places patches randomly; pass an explicit location")
        location = spec.location
    r, col = location
    if r < 0 or col < 0 or r + ph > h or col + pw > w:
        raise ConfigError(f"patch {ph}x{pw} at {(r, col)} falls outside {h}x{w} image")
    out = image.copy()
    out[r:r + ph, col:col + pw, :] = spec.pattern
    return out


def _draw_location(rng, spec: TriggerSpec, h: int, w: int):
    ph, pw = spec.patch_shape
    if spec.location == RANDOM_LOCATION:
        return (int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1)))
    return tuple(spec.location)


def _new_label(spec: TriggerSpec, label: int) -> int:
    if spec.attack_mode == "all-to-all":
        return int(spec.target_label[label])
    return int(spec.target_label)


def inject_trigger(data: LabeledDataset, spec: TriggerSpec, seed: int):
    """Poison a copy of ``data`` according to ``spec``.

    Eligible samples are the source class for single-target attacks and
    every sample otherwise. Exactly round(poison_fraction * eligible)
    images get the patch written over their pixels and their label
    rewritten; everything else is untouched. Returns the poisoned
    dataset plus a PoisonReport.
    """
    h, w, c = data.image_shape
    spec.validate_for(h, w, c, data.num_classes)
    if spec.attack_mode == "single-target":
        eligible = np.flatnonzero(data.labels == spec.source_label)
    else:
        eligible = np.arange(len(data))
    n_poison = int(round(spec.poison_fraction * len(eligible)))
    if n_poison == 0:
        raise ConfigError(
            f"poison_fraction {spec.poison_fraction} selects zero of "
            f"{len(eligible)} eligible samples")

    rng = np.random.default_rng(seed)
    chosen = rng.choice(eligible, size=n_poison, replace=False)
    images = data.images.copy()
    labels = data.labels.copy()
    boxes = []
    counts: dict = {}
    ph, pw = spec.patch_shape
    for idx in chosen:
        r, col = _draw_location(rng, spec, h, w)
        images[idx, r:r + ph, col:col + pw, :] = spec.pattern
        orig = int(labels[idx])
        labels[idx] = _new_label(spec, orig)
        counts[orig] = counts.get(orig, 0) + 1
        boxes.append((r, col, ph, pw))
    report = PoisonReport(
        num_poisoned=n_poison,
        per_class_counts=counts,
        trigger_hash=spec.trigger_hash(),
        bounding_boxes=boxes,
    )
    return LabeledDataset(images, labels, data.num_classes, data.split), report


# ---------------------------------------------------------------------------
# Trigger sources: where zoo triggers come from
# ---------------------------------------------------------------------------

def max_patch_side(h: int, w: int) -> int:
    return int(np.floor(np.sqrt(MAX_PATCH_AREA_FRACTION * h * w)))


def _draw_patch_shape(rng, h, w, min_side, min_area):
    """Rectangular (ph, pw) with min sides and area within the 3% budget.

    Desk-scale measurement: patches below ~12 pixels cannot reach the 95%
    attack-success gate inside the training budget, so the draw keeps the
    area in [min_area, floor(0.03*H*W)] while staying within the paper's
    smallness constraint.
    """
    budget = int(np.floor(MAX_PATCH_AREA_FRACTION * h * w))
    if min_side * min_side > budget:
        raise ConfigError(f"min_side {min_side} impossible within 3% of {h}x{w}")
    ph_hi = min(h, budget // min_side)
    for _ in range(64):
        ph = int(rng.integers(min_side, ph_hi + 1))
        pw_lo = max(min_side, -(-min_area // ph))
        pw_hi = min(w, budget // ph)
        if pw_lo > pw_hi:
            continue
        pw = int(rng.integers(pw_lo, pw_hi + 1))
        return ph, pw
    return min_side, max(min_side, min(w, budget // min_side))


@dataclass(frozen=True)
class VaccinePatternSource:
    """Random uniform patches: the known trigger family used for training.

    ``placement`` controls where drawn specs put the patch: "per-image"
    re-draws the position for every poisoned image (the default zoo
    protocol), "per-model" fixes one random location per spec (positions
    then vary across the population but not within a training set, which
    makes the attack much easier to train).
    """

    min_side: int = 3
    min_area: int = 12
    placement: str = "per-image"

    def draw(self, rng, h, w, c, k, attack_mode, poison_fraction) -> TriggerSpec:
        ph, pw = _draw_patch_shape(rng, h, w, self.min_side, self.min_area)
        pattern = rng.uniform(0.0, 1.0, size=(ph, pw, c)).astype(np.float32)
        loc = _draw_placement(rng, self.placement, (ph, pw), h, w)
        return _finish_spec(rng, pattern, loc, k, attack_mode, poison_fraction)

    def tag(self) -> str:
        return "vaccine"


@dataclass(frozen=True)
class CropPatternSource:
    """Patches cropped from held-out images: unknown-trigger family for evaluation.

    Crops with standard deviation below ``min_contrast`` are redrawn, so a
    degenerate near-constant patch never becomes a trigger.
    """

    images: np.ndarray  # (N, H, W, C)
    min_side: int = 3
    min_area: int = 12
    min_contrast: float = 0.12
    placement: str = "per-image"

    def draw(self, rng, h, w, c, k, attack_mode, poison_fraction) -> TriggerSpec:
        src = np.asarray(self.images, dtype=np.float32)
        ph, pw = _draw_patch_shape(rng, h, w, self.min_side, self.min_area)
        for _ in range(64):
            i = int(rng.integers(0, len(src)))
            r = int(rng.integers(0, src.shape[1] - ph + 1))
            col = int(rng.integers(0, src.shape[2] - pw + 1))
            crop = src[i, r:r + ph, col:col + pw, :]
            if crop.std() >= self.min_contrast:
                break
        pattern = np.ascontiguousarray(crop[:, :, :c]) if crop.shape[2] >= c \
            else np.repeat(crop, c, axis=2)
        loc = _draw_placement(rng, self.placement, (ph, pw), h, w)
        return _finish_spec(rng, pattern, loc, k, attack_mode, poison_fraction)

    def tag(self) -> str:
        return "virus"


def _draw_placement(rng, placement, patch_shape, h, w):
    ph, pw = patch_shape
    if placement == "per-image":
        return RANDOM_LOCATION
    if placement == "per-model":
        return (int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1)))
    raise ConfigError(f"unknown placement {placement!r}")


def _finish_spec(rng, pattern, loc, k, attack_mode, poison_fraction) -> TriggerSpec:
    if attack_mode == "single-target":
        source = int(rng.integers(0, k))
        target = int((source + 1 + rng.integers(0, k - 1)) % k)
        return TriggerSpec(pattern, loc, target, attack_mode,
                           poison_fraction, source_label=source)
    if attack_mode == "all-to-one":
        target = int(rng.integers(0, k))
        return TriggerSpec(pattern, loc, target, attack_mode, poison_fraction)
    shift = int(rng.integers(1, k))
    perm = tuple(int(p) for p in (np.arange(k) + shift) % k)
    return TriggerSpec(pattern, loc, perm, attack_mode, poison_fraction)
