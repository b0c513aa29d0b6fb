"""Synthetic shape datasets, dataset file I/O, and augmentation policies.

Every random draw is a pure function of (policy, global_seed, image_index,
sample_index) through a splitmix64 counter mix; there is no global RNG
state anywhere in the package.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .tensor_engine import Tensor

DATASET_MAGIC = b"MTDS"
DATASET_VERSION = 1

SHAPE_NAMES = ("disk", "square", "triangle", "cross", "ring", "bar")

_MASK64 = (1 << 64) - 1


class DatasetFormatError(ValueError):
    """Dataset file is not a valid MTDS payload."""


class NonEnumerablePolicyError(ValueError):
    """Exact enumeration requested for a policy without a finite transform set."""


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer; stable across platforms."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix_seed(*parts) -> int:
    """Fold integers (or short strings) into one 64-bit seed."""
    acc = 0x243F6A8885A308D3
    for p in parts:
        if isinstance(p, str):
            for b in p.encode("utf-8"):
                acc = splitmix64(acc ^ b)
        else:
            acc = splitmix64(acc ^ (int(p) & _MASK64))
    return acc


def seeded_rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(mix_seed(*parts)))


# ---------------------------------------------------------------------------
# transforms

@dataclass(frozen=True)
class TransformParams:
    """A concrete image transform: crop, resize, quarter turns, flip.

    The crop box is in source pixels (x0 horizontal, y0 vertical) and must
    lie fully inside the source image. Application order is crop, bilinear
    resize to (out_h, out_w), rot90 quarter turns counterclockwise, then
    horizontal flip.
    """

    x0: int
    y0: int
    w: int
    h: int
    flip: bool
    out_h: int
    out_w: int
    rot90: int = 0
    resample: str = "bilinear"


POLICY_KINDS = ("CentralCrop", "RandomResizedCropFlip", "FlipGroup",
                "Rot90Group", "MultiScale")

GROUP_KINDS = ("FlipGroup", "Rot90Group", "MultiScale")

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)


@dataclass(frozen=True)
class AugmentationPolicy:
    """A named distribution (or finite set) of image transforms.

    ``in_size`` is the side of the square source images the policy is
    configured for; group policies and central crops need it to produce
    absolute crop boxes without seeing the image.
    """

    kind: str
    in_size: int
    out_size: int = 0
    crop_fraction: float = 0.875
    s_lo: float = 0.6
    s_hi: float = 1.0
    scales: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.in_size < 1:
            raise ValueError(f"in_size must be >= 1, got {self.in_size}")
        if self.kind == "CentralCrop" and not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError(f"crop_fraction must be in (0, 1], got {self.crop_fraction}")
        if self.kind == "RandomResizedCropFlip" and not 0.0 < self.s_lo <= self.s_hi <= 1.0:
            raise ValueError(
                f"need 0 < s_lo <= s_hi <= 1, got s_lo={self.s_lo} s_hi={self.s_hi}")
        if self.kind == "MultiScale":
            if not self.scales or any(s <= 0 for s in self.scales):
                raise ValueError("MultiScale needs a non-empty list of positive scales")

    @property
    def is_deterministic(self) -> bool:
        return self.kind == "CentralCrop"

    @property
    def is_group(self) -> bool:
        return self.kind in GROUP_KINDS

    def descriptor(self) -> str:
        if self.kind == "CentralCrop":
            return f"CentralCrop(f={self.crop_fraction:g},in={self.in_size},out={self.output_size})"
        if self.kind == "RandomResizedCropFlip":
            return (f"RandomResizedCropFlip(s=[{self.s_lo:g},{self.s_hi:g}],"
                    f"in={self.in_size},out={self.output_size})")
        if self.kind == "MultiScale":
            scales = ",".join(f"{s:g}" for s in self.scales)
            return f"MultiScale([{scales}],in={self.in_size})"
        return f"{self.kind}(in={self.in_size})"

    @property
    def output_size(self) -> int:
        return self.out_size if self.out_size > 0 else self.in_size

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "in_size": self.in_size}
        if self.kind == "CentralCrop":
            d.update(crop_fraction=self.crop_fraction, out_size=self.output_size)
        elif self.kind == "RandomResizedCropFlip":
            d.update(s_lo=self.s_lo, s_hi=self.s_hi, out_size=self.output_size)
        elif self.kind == "MultiScale":
            d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        d = dict(d)
        kind = d.pop("kind")
        if "scales" in d:
            d["scales"] = tuple(d["scales"])
        return cls(kind=kind, **d)


def central_crop(in_size: int, out_size: int = 0, crop_fraction: float = 0.875) -> AugmentationPolicy:
    return AugmentationPolicy("CentralCrop", in_size, out_size or in_size,
                              crop_fraction=crop_fraction)


def random_resized_crop_flip(in_size: int, out_size: int = 0,
                             s_lo: float = 0.6, s_hi: float = 1.0) -> AugmentationPolicy:
    return AugmentationPolicy("RandomResizedCropFlip", in_size, out_size or in_size,
                              s_lo=s_lo, s_hi=s_hi)


def flip_group(in_size: int) -> AugmentationPolicy:
    return AugmentationPolicy("FlipGroup", in_size, in_size)


def rot90_group(in_size: int) -> AugmentationPolicy:
    return AugmentationPolicy("Rot90Group", in_size, in_size)


def multi_scale(in_size: int, scales=(1.0 / math.sqrt(2.0), 1.0, math.sqrt(2.0))) -> AugmentationPolicy:
    return AugmentationPolicy("MultiScale", in_size, scales=tuple(scales))


def _central_box(in_size: int, fraction: float) -> tuple[int, int, int, int]:
    side = max(1, int(round(fraction * in_size)))
    off = (in_size - side) // 2
    return off, off, side, side


def _full_box(in_size: int) -> tuple[int, int, int, int]:
    return 0, 0, in_size, in_size


def enumerate_group(policy: AugmentationPolicy) -> list[TransformParams]:
    """Exact transform list for a finite policy.

    FlipGroup gives [identity, hflip]; Rot90Group the four quarter turns;
    MultiScale one full-image resize per configured scale.
    """
    n = policy.in_size
    x0, y0, w, h = _full_box(n)
    if policy.kind == "FlipGroup":
        return [TransformParams(x0, y0, w, h, flip=f, out_h=n, out_w=n)
                for f in (False, True)]
    if policy.kind == "Rot90Group":
        return [TransformParams(x0, y0, w, h, flip=False, out_h=n, out_w=n, rot90=k)
                for k in range(4)]
    if policy.kind == "MultiScale":
        out = []
        for s in policy.scales:
            side = max(1, int(round(s * n)))
            out.append(TransformParams(x0, y0, w, h, flip=False, out_h=side, out_w=side))
        return out
    raise NonEnumerablePolicyError(f"{policy.kind} has no finite transform set")


def sample_transform(policy: AugmentationPolicy, global_seed: int,
                     image_index: int, sample_index: int) -> TransformParams:
    """Draw one transform; a pure function of the four arguments."""
    if image_index < 0 or sample_index < 0:
        raise ValueError("image_index and sample_index must be >= 0")
    n = policy.in_size
    out = policy.output_size

    if policy.kind == "CentralCrop":
        x0, y0, w, h = _central_box(n, policy.crop_fraction)
        return TransformParams(x0, y0, w, h, flip=False, out_h=out, out_w=out)

    rng = seeded_rng(global_seed, image_index, sample_index)
    if policy.kind == "RandomResizedCropFlip":
        area = float(rng.uniform(policy.s_lo, policy.s_hi)) * n * n
        ar = float(rng.uniform(*ASPECT_RANGE))
        w = int(round(math.sqrt(area * ar)))
        h = int(round(math.sqrt(area / ar)))
        w = min(max(w, 1), n)
        h = min(max(h, 1), n)
        x0 = int(rng.integers(0, n - w + 1))
        y0 = int(rng.integers(0, n - h + 1))
        flip = bool(rng.random() < 0.5)
        return TransformParams(x0, y0, w, h, flip=flip, out_h=out, out_w=out)

    members = enumerate_group(policy)
    return members[int(rng.integers(0, len(members)))]


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear resize with corner-aligned sample points.

    A size-1 output axis samples the source center. Same-size resize is an
    exact identity.
    """
    c, h, w = arr.shape
    src = arr.astype(np.float64)

    def axis_coords(n_out, n_src):
        if n_out == 1:
            return np.full(1, (n_src - 1) / 2.0)
        return np.arange(n_out) * ((n_src - 1) / (n_out - 1))

    ys = axis_coords(out_h, h)
    xs = axis_coords(out_w, w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    tl = src[:, y0[:, None], x0[None, :]]
    tr = src[:, y0[:, None], x1[None, :]]
    bl = src[:, y1[:, None], x0[None, :]]
    br = src[:, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return (top + (bot - top) * fy).astype(np.float32)


def apply_transform(image: Tensor, t: TransformParams) -> Tensor:
    """Crop, resize, rotate, flip. Preserves the [0, 1] value range."""
    arr = image.data
    if arr.ndim != 3:
        raise ValueError(f"expected (C,H,W) image, got shape {arr.shape}")
    _, h, w = arr.shape
    if t.w < 1 or t.h < 1 or t.x0 < 0 or t.y0 < 0 or t.x0 + t.w > w or t.y0 + t.h > h:
        raise ValueError(
            f"crop box (x0={t.x0},y0={t.y0},w={t.w},h={t.h}) outside {h}x{w} image")
    crop = arr[:, t.y0:t.y0 + t.h, t.x0:t.x0 + t.w]
    out = bilinear_resize(crop, t.out_h, t.out_w)
    if t.rot90 % 4:
        out = np.rot90(out, k=t.rot90 % 4, axes=(1, 2))
    if t.flip:
        out = out[:, :, ::-1]
    return Tensor(out)


# ---------------------------------------------------------------------------
# synthetic dataset

@dataclass
class Dataset:
    """Images in [0, 1] with integer class labels."""

    images: list[Tensor]
    labels: list[int]
    num_classes: int

    @property
    def size(self) -> int:
        return len(self.images)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if any(not 0 <= y < self.num_classes for y in self.labels):
            raise ValueError("label out of range")

    def subset(self, indices) -> "Dataset":
        return Dataset([self.images[i] for i in indices],
                       [self.labels[i] for i in indices], self.num_classes)


def _shape_coverage(label: int, xr: np.ndarray, yr: np.ndarray, r: float) -> np.ndarray:
    """Soft-edged membership of rotated grid coords in the labelled shape."""
    name = SHAPE_NAMES[label]
    if name == "disk":
        d = np.hypot(xr, yr) - r
    elif name == "square":
        d = np.maximum(np.abs(xr), np.abs(yr)) - 0.82 * r
    elif name == "triangle":
        # equilateral, circumradius r: three edge half-planes
        d = None
        for ang in (math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3):
            e = xr * math.cos(ang) + yr * math.sin(ang) - 0.5 * r
            d = e if d is None else np.maximum(d, e)
    elif name == "cross":
        t = 0.32 * r
        armx = np.maximum(np.abs(xr) - r, np.abs(yr) - t)
        army = np.maximum(np.abs(xr) - t, np.abs(yr) - r)
        d = np.minimum(armx, army)
    elif name == "ring":
        d = np.abs(np.hypot(xr, yr) - 0.78 * r) - 0.22 * r
    else:  # bar
        d = np.maximum(np.abs(xr) - r, np.abs(yr) - 0.3 * r)
    return np.clip(0.5 - d / 1.2, 0.0, 1.0)


def gen_shapes_dataset(seed: int, count: int, num_classes: int, image_size: int,
                       *, noise: float = 0.16) -> Dataset:
    """Procedural shape classification set, fully determined by the seed.

    Shapes get random position, size, rotation, and contrast over a noisy
    background with a random low-frequency ramp.
    """
    if not 1 <= num_classes <= len(SHAPE_NAMES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPE_NAMES)}], got {num_classes}")
    if count < num_classes:
        raise ValueError(f"count {count} < num_classes {num_classes}")
    if image_size < 4:
        raise ValueError(f"image_size must be >= 4, got {image_size}")

    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    images: list[Tensor] = []
    labels: list[int] = []
    for i in range(count):
        rng = seeded_rng(seed, i)
        label = int(rng.integers(0, num_classes))
        cx = image_size * float(rng.uniform(0.32, 0.68))
        cy = image_size * float(rng.uniform(0.32, 0.68))
        r = image_size * float(rng.uniform(0.16, 0.34))
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        x = xs - cx
        y = ys - cy
        xr = cos_t * x + sin_t * y
        yr = -sin_t * x + cos_t * y
        cov = _shape_coverage(label, xr, yr, r)

        base = float(rng.uniform(0.12, 0.4))
        ramp_dir = float(rng.uniform(0.0, 2.0 * math.pi))
        ramp_amp = float(rng.uniform(0.0, 0.18))
        ramp = ramp_amp * ((x * math.cos(ramp_dir) + y * math.sin(ramp_dir))
                           / image_size + 0.5)
        chans = []
        for _c in range(3):
            fg = float(rng.uniform(0.62, 1.0))
            bg = base + ramp + rng.normal(0.0, noise, size=(image_size, image_size))
            chans.append(bg + cov * (fg - bg))
        img = np.clip(np.stack(chans), 0.0, 1.0).astype(np.float32)
        images.append(Tensor(img))
        labels.append(label)
    return Dataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# dataset I/O

def save_dataset(ds: Dataset, path) -> None:
    """Write the MTDS binary format (little-endian throughout)."""
    if ds.size:
        c, h, w = ds.images[0].shape
    else:
        c = h = w = 0
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIIIII", DATASET_VERSION, ds.size, ds.num_classes, c, h, w))
        for img, label in zip(ds.images, ds.labels):
            if img.shape != (c, h, w):
                raise ValueError(f"inconsistent image shape {img.shape} vs {(c, h, w)}")
            f.write(struct.pack("<I", label))
            f.write(img.data.astype("<f4").tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"truncated dataset file (wanted {n} bytes, got {len(buf)})")
    return buf


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        version, k, num_classes, c, h, w = struct.unpack("<IIIIII", _read_exact(f, 24))
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        images: list[Tensor] = []
        labels: list[int] = []
        payload = c * h * w * 4
        for _ in range(k):
            (label,) = struct.unpack("<I", _read_exact(f, 4))
            if label >= num_classes:
                raise DatasetFormatError(f"label {label} out of range")
            raw = np.frombuffer(_read_exact(f, payload), dtype="<f4")
            images.append(Tensor(raw.reshape(c, h, w)))
            labels.append(int(label))
    return Dataset(images, labels, num_classes)
