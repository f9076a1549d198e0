"""Image/noise data model, raster I/O, seeded noise synthesis, and patch extraction.

Conventions used throughout the package:

* intensities live on [0, 1]; noise levels (sigma) are quoted on the 0-255
  scale and divided by 255 internally,
* every stochastic operation takes an explicit integer seed and draws from
  a Philox counter-based generator, so results are bit-reproducible across
  runs and platforms,
* noise fields are kept unclipped; clipping to [0, 1] happens only when a
  field is composed with an image.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import DecodeError, FormatError, ParameterError

__all__ = [
    "Image",
    "NoiseField",
    "DatasetManifest",
    "derive_seed",
    "rng_from_seed",
    "load_image",
    "save_image",
    "add_gaussian_noise",
    "extract_patches",
    "synth_image",
    "make_corpus",
]

MIN_SIDE = 8


def derive_seed(master: int, label: str) -> int:
    """Derive a stable per-operation seed from a master seed and a label.

    SHA-256 of ``"{master}\\x1f{label}"``, truncated to 63 bits. The scheme is
    fixed so that every stochastic step of an experiment is addressable from
    the global seed alone.
    """
    digest = hashlib.sha256(f"{master}\x1f{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def rng_from_seed(seed: int) -> np.random.Generator:
    """Project-wide RNG: Philox4x64 keyed by the seed (counter-based)."""
    return np.random.Generator(np.random.Philox(key=seed))


def _as_grid(pixels: np.ndarray) -> np.ndarray:
    """Coerce to a read-only float64 (H, W, C) grid."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ParameterError(f"pixel grid must be HxW or HxWxC, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image:
    """H x W x C intensity grid on [0, 1]; the universal pixel container."""

    pixels: np.ndarray
    id: str = ""

    def __post_init__(self):
        arr = _as_grid(self.pixels)
        object.__setattr__(self, "pixels", arr)
        h, w, c = arr.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ParameterError(f"image sides must be >= {MIN_SIDE}, got {h}x{w}")
        if c not in (1, 3):
            raise ParameterError(f"channel count must be 1 or 3, got {c}")
        if not np.isfinite(arr).all():
            raise ParameterError("image contains non-finite values")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ParameterError(f"intensities outside [0, 1]: min={lo}, max={hi}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def with_id(self, new_id: str) -> "Image":
        return Image(self.pixels, id=new_id)


@dataclass(frozen=True)
class NoiseField:
    """Signed H x W x C grid paired with an Image; unclipped by design."""

    values: np.ndarray

    def __post_init__(self):
        arr = _as_grid(self.values)
        object.__setattr__(self, "values", arr)
        if not np.isfinite(arr).all():
            raise ParameterError("noise field contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.values.ravel()))

    def linf_norm(self) -> float:
        return float(np.max(np.abs(self.values)))


def compose(u: Image, n: NoiseField, id: str = "") -> Image:
    """clip(u + n, 0, 1) as an Image; the only place clipping happens."""
    if n.shape != u.pixels.shape:
        raise ParameterError(f"shape mismatch: image {u.pixels.shape}, noise {n.shape}")
    return Image(np.clip(u.pixels + n.values, 0.0, 1.0), id=id)


# ---------------------------------------------------------------------------
# Raster I/O (lossless 8/16-bit PNG and PGM)
# ---------------------------------------------------------------------------

_MODE_MAX = {"L": 255, "RGB": 255, "I": 65535, "I;16": 65535}


def load_image(path) -> Image:
    """Load an 8- or 16-bit lossless raster (PNG or PGM) scaled to [0, 1].

    Intensities are divided by the format maximum (255 or 65535); the
    channel count is preserved.
    """
    path = Path(path)
    if not path.exists():
        raise DecodeError(f"no such file: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            fmt = im.format
            mode = im.mode
            if fmt not in ("PNG", "PPM"):  # Pillow reports PGM under the PPM plugin
                raise FormatError(f"{path}: unsupported format {fmt!r} (PNG or PGM only)")
            if mode not in _MODE_MAX:
                raise FormatError(f"{path}: unsupported mode/bit depth {mode!r}")
            arr = np.asarray(im)
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{path}: cannot decode ({exc})") from exc
    except OSError as exc:
        raise DecodeError(f"{path}: truncated or corrupt file ({exc})") from exc
    maxval = _MODE_MAX[mode]
    if arr.dtype == np.int32 and arr.max(initial=0) > 65535:
        raise FormatError(f"{path}: sample values exceed 16-bit range")
    pixels = arr.astype(np.float64) / maxval
    return Image(pixels, id=path.stem)


def save_image(img: Image, path, bit_depth: int = 8) -> None:
    """Write an Image as PNG or PGM (by extension), 8- or 16-bit.

    Values are scaled by the format maximum and rounded; loading the file
    back reproduces the rounded values exactly.
    """
    path = Path(path)
    if bit_depth == 8:
        scaled = np.round(img.pixels * 255.0).astype(np.uint8)
    elif bit_depth == 16:
        scaled = np.round(img.pixels * 65535.0).astype(np.uint16)
    else:
        raise ParameterError(f"bit_depth must be 8 or 16, got {bit_depth}")
    if img.channels == 1:
        data = scaled[:, :, 0]
        if bit_depth == 8:
            pil = PILImage.fromarray(data, mode="L")
        else:
            pil = PILImage.fromarray(data.astype(np.uint16), mode="I;16")
    else:
        if bit_depth == 16:
            raise FormatError("16-bit color output is not supported")
        pil = PILImage.fromarray(scaled, mode="RGB")
    suffix = path.suffix.lower()
    if suffix == ".png":
        pil.save(path, format="PNG")
    elif suffix in (".pgm", ".ppm"):
        if img.channels == 1 and suffix == ".ppm":
            raise ParameterError("use .pgm for single-channel images")
        pil.save(path, format="PPM")
    else:
        raise ParameterError(f"unsupported output extension {suffix!r} (png/pgm/ppm)")


# ---------------------------------------------------------------------------
# Noise synthesis
# ---------------------------------------------------------------------------


def add_gaussian_noise(u: Image, sigma: float, seed: int) -> tuple[Image, NoiseField]:
    """Observe ``u`` under i.i.d. zero-mean Gaussian noise of level ``sigma``.

    ``sigma`` is on the 0-255 scale. Returns the clipped observation
    ``x = clip(u + n, 0, 1)`` together with the exact unclipped field ``n``,
    which downstream geometry needs verbatim.
    """
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    rng = rng_from_seed(seed)
    n = rng.normal(0.0, sigma / 255.0, size=u.pixels.shape)
    noise = NoiseField(n)
    x = compose(u, noise, id=f"{u.id}+g{sigma:g}" if u.id else "")
    return x, noise


# ---------------------------------------------------------------------------
# Dataset manifest and patch extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    """A JSON-serializable list of images plus patching parameters."""

    root: Path
    entries: tuple[tuple[str, str], ...]  # (image id, path relative to root)
    split: str = "train"
    patch_size: int = 40
    stride: int = 20

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "entries", tuple((str(i), str(p)) for i, p in self.entries))
        if self.patch_size <= 0 or self.stride <= 0:
            raise ParameterError("patch_size and stride must be positive")
        missing = [p for _, p in self.entries if not (self.root / p).exists()]
        if missing:
            raise ParameterError(f"manifest references missing files: {missing[:3]}")

    def image_path(self, index: int) -> Path:
        return self.root / self.entries[index][1]

    def load_images(self) -> list[Image]:
        return [load_image(self.root / p).with_id(i) for i, p in self.entries]

    def to_json(self) -> dict:
        return {
            "root": str(self.root),
            "entries": [[i, p] for i, p in self.entries],
            "split": self.split,
            "patch_size": self.patch_size,
            "stride": self.stride,
        }

    def save(self, path) -> None:
        path = Path(path)
        doc = self.to_json()
        doc["root"] = "."  # paths are kept relative to the manifest location
        path.write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        root = Path(doc["root"])
        if not root.is_absolute():
            root = path.parent / root
        return cls(
            root=root,
            entries=tuple((e[0], e[1]) for e in doc["entries"]),
            split=doc.get("split", "train"),
            patch_size=int(doc["patch_size"]),
            stride=int(doc["stride"]),
        )


def extract_patches(manifest: DatasetManifest) -> list[Image]:
    """Sliding-window patches in row-major order, deterministic enumeration.

    For each manifest entry in order, windows start at rows/cols
    0, stride, 2*stride, ... while the window fits.
    """
    size, stride = manifest.patch_size, manifest.stride
    patches: list[Image] = []
    for image_id, rel in manifest.entries:
        img = load_image(manifest.root / rel)
        h, w = img.height, img.width
        if size > min(h, w):
            raise ParameterError(
                f"patch size {size} exceeds image {image_id} ({h}x{w})"
            )
        for top in range(0, h - size + 1, stride):
            for left in range(0, w - size + 1, stride):
                window = img.pixels[top : top + size, left : left + size]
                patches.append(Image(window, id=f"{image_id}:r{top}c{left}"))
    return patches


# ---------------------------------------------------------------------------
# Synthetic corpus (desk-scale stand-in for a natural-image training set)
# ---------------------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    """Low-frequency random field via bilinear upsampling of a coarse grid."""
    coarse = rng.normal(size=(cells, cells))
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    y0 = np.clip(ys.astype(int), 0, cells - 2)
    x0 = np.clip(xs.astype(int), 0, cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def synth_image(seed: int, height: int = 180, width: int = 180) -> Image:
    """Deterministic piecewise-smooth test image: ramps, shapes, mild texture.

    Stands in for a natural-image corpus at desk scale. Content mixes a
    smooth background, a handful of hard-edged shapes (ellipses, boxes,
    bands) with their own gradients, and a low-amplitude sinusoidal texture.
    """
    if height < MIN_SIDE or width < MIN_SIDE:
        raise ParameterError("synthetic images must be at least 8x8")
    rng = rng_from_seed(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    field = _smooth_field(rng, height, width, int(rng.integers(3, 7)))
    span = field.max() - field.min()
    img = 0.35 + 0.3 * (field - field.min()) / (span if span > 0 else 1.0)

    for _ in range(int(rng.integers(4, 9))):
        kind = rng.choice(["ellipse", "box", "band"])
        level = rng.uniform(0.08, 0.92)
        grad = rng.uniform(-0.15, 0.15)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        if kind == "ellipse":
            ry = rng.uniform(0.06, 0.3) * height
            rx = rng.uniform(0.06, 0.3) * width
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        elif kind == "box":
            hh = rng.uniform(0.05, 0.25) * height
            ww = rng.uniform(0.05, 0.25) * width
            mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= ww)
        else:
            angle = rng.uniform(0, np.pi)
            dist = (yy - cy) * np.sin(angle) + (xx - cx) * np.cos(angle)
            mask = np.abs(dist) <= rng.uniform(0.02, 0.08) * min(height, width)
        shade = level + grad * ((yy - cy) / height + (xx - cx) / width)
        img = np.where(mask, shade, img)

    amp = rng.uniform(0.0, 0.05)
    fy, fx = rng.uniform(0.05, 0.35, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    img = img + amp * np.sin(fy * yy + fx * xx + phase)

    img = np.clip(img, 0.02, 0.98)
    return Image(img[:, :, None], id=f"synth-{seed:08x}")


def make_corpus(
    root,
    count: int,
    height: int,
    width: int,
    seed: int,
    split: str = "train",
    patch_size: int = 40,
    stride: int = 20,
) -> DatasetManifest:
    """Write ``count`` synthetic 8-bit PNGs plus a manifest under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for k in range(count):
        img = synth_image(derive_seed(seed, f"{split}/{k}"), height, width)
        name = f"{split}-{k:03d}.png"
        save_image(img, root / name)
        entries.append((f"{split}-{k:03d}", name))
    manifest = DatasetManifest(
        root=root, entries=tuple(entries), split=split, patch_size=patch_size, stride=stride
    )
    manifest.save(root / "manifest.json")
    return manifest
