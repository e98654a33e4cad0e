"""Raster I/O, palette-encoded masks, crop/rotate/shift augmentation and a
synthetic land-cover tile generator."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .tensor import ContractError


class DataError(Exception):
    """Raised for unreadable, malformed or inconsistent input data."""


@dataclass(frozen=True)
class Palette:
    entries: tuple[tuple[str, tuple[int, int, int]], ...]
    excluded_classes: frozenset[int] = frozenset()

    def __post_init__(self):
        colors = [rgb for _, rgb in self.entries]
        if len(set(colors)) != len(colors):
            raise ContractError("palette colors must be unique")
        bad = [c for c in self.excluded_classes if not 0 <= c < len(self.entries)]
        if bad:
            raise ContractError(f"excluded classes {bad} outside palette of size {len(self.entries)}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    @property
    def colors(self) -> np.ndarray:
        return np.array([rgb for _, rgb in self.entries], dtype=np.uint8)

    def subset(self, num_classes: int) -> "Palette":
        if num_classes > len(self):
            raise ContractError(f"palette has {len(self)} classes, {num_classes} requested")
        excluded = frozenset(c for c in self.excluded_classes if c < num_classes)
        return Palette(self.entries[:num_classes], excluded)


ISPRS_PALETTE = Palette(
    (
        ("impervious_surfaces", (255, 255, 255)),
        ("building", (0, 0, 255)),
        ("low_vegetation", (0, 255, 255)),
        ("tree", (0, 255, 0)),
        ("car", (255, 255, 0)),
        ("clutter", (255, 0, 0)),
    )
)


def default_palette(num_classes: int) -> Palette:
    if num_classes <= len(ISPRS_PALETTE):
        return ISPRS_PALETTE.subset(num_classes)
    entries = list(ISPRS_PALETTE.entries)
    rng = np.random.default_rng(num_classes)
    used = {rgb for _, rgb in entries}
    while len(entries) < num_classes:
        rgb = tuple(int(v) for v in rng.integers(0, 256, 3))
        if rgb not in used:
            used.add(rgb)
            entries.append((f"class_{len(entries)}", rgb))
    return Palette(tuple(entries))


@dataclass
class LabelMap:
    labels: np.ndarray  # H × W, uint8
    palette: Palette = field(default=ISPRS_PALETTE)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ContractError(f"label map must be 2-D, got shape {self.labels.shape}")
        if self.labels.size and int(self.labels.max()) >= len(self.palette):
            raise ContractError(f"label {int(self.labels.max())} outside palette of size {len(self.palette)}")
        self.labels = self.labels.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def to_rgb(self) -> np.ndarray:
        return self.palette.colors[self.labels]


@dataclass
class SamplePatch:
    image: np.ndarray  # C × h × w in [0, 1]
    mask: np.ndarray  # h × w class indices

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise ContractError(f"image {self.image.shape} and mask {self.mask.shape} are not aligned")


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


# raster I/O ------------------------------------------------------------------


def _read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L"):
                im = im.convert("RGBA" if "A" in im.mode else "RGB")
            arr = np.asarray(im)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except OSError as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from None
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: expected 8-bit samples, got {arr.dtype}")
    return arr


def load_raster(path) -> np.ndarray:
    """Read an 8-bit PNG as a C×H×W float32 array scaled to [0, 1]."""
    arr = _read_png(path)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def save_raster(image: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def decode_colors(rgb: np.ndarray, palette: Palette, source: str = "mask") -> np.ndarray:
    rgb = rgb[:, :, :3].astype(np.uint32)
    keys = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    colors = palette.colors.astype(np.uint32)
    table = (colors[:, 0] << 16) | (colors[:, 1] << 8) | colors[:, 2]
    order = np.argsort(table)
    pos = np.clip(np.searchsorted(table[order], keys), 0, len(table) - 1)
    hit = table[order][pos] == keys
    if not hit.all():
        uniq, counts = np.unique(keys[~hit], return_counts=True)
        listing = ", ".join(
            f"({k >> 16},{(k >> 8) & 255},{k & 255}) x{n}" for k, n in zip(uniq.tolist(), counts.tolist())
        )
        raise DataError(f"{source}: colors not in palette: {listing}")
    return order[pos].astype(np.uint8)


def decode_mask(path, palette: Palette = ISPRS_PALETTE) -> LabelMap:
    arr = _read_png(path)
    if arr.ndim != 3:
        raise DataError(f"{path}: mask must be RGB(A)")
    return LabelMap(decode_colors(arr, palette, str(path)), palette)


def encode_mask(mask, path, palette: Palette | None = None) -> None:
    if isinstance(mask, LabelMap):
        palette = palette or mask.palette
    Image.fromarray(LabelMap(_labels(mask), palette or ISPRS_PALETTE).to_rgb()).save(path)


# manifests -------------------------------------------------------------------


def read_manifest(path) -> list[tuple[Path, Path]]:
    """Parse ``image mask`` pairs, one per line; '#' starts a comment.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(f"{path}: no such manifest") from None
    pairs = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'image_path mask_path', got {line!r}")
        pairs.append(tuple(p if Path(p).is_absolute() else path.parent / p for p in map(Path, parts)))
    return pairs


def write_manifest(pairs, path, header: str | None = None) -> None:
    path = Path(path)
    lines = [f"# {header}"] if header else []
    for image, mask in pairs:
        lines.append(f"{Path(image).as_posix()} {Path(mask).as_posix()}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(manifest, palette: Palette = ISPRS_PALETTE) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for image_path, mask_path in read_manifest(manifest):
        image = load_raster(image_path)
        mask = decode_mask(mask_path, palette).labels
        if image.shape[1:] != mask.shape:
            raise DataError(f"{image_path} is {image.shape[1:]} but {mask_path} is {mask.shape}")
        out.append((image, mask))
    if not out:
        raise DataError(f"{manifest}: manifest lists no samples")
    return out


# augmentation ----------------------------------------------------------------


def random_crop(image: np.ndarray, mask, size: int, rng: np.random.Generator) -> SamplePatch:
    mask = _labels(mask)
    h, w = mask.shape
    if size > min(h, w) or size < 1:
        raise ContractError(f"crop size {size} does not fit a {h}×{w} raster")
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    return SamplePatch(image[:, y0 : y0 + size, x0 : x0 + size], mask[y0 : y0 + size, x0 : x0 + size])


def rotate(patch: SamplePatch, quarter_turns: int) -> SamplePatch:
    """Counter-clockwise rotation by ``quarter_turns`` × 90°."""
    k = quarter_turns % 4
    return SamplePatch(np.rot90(patch.image, k, axes=(1, 2)), np.rot90(patch.mask, k))


def translate(patch: SamplePatch, dy: int, dx: int) -> SamplePatch:
    """Shift content by (dy, dx), filling the exposed border by reflection.

    Pixel (i, j) of the result shows source pixel (i - dy, j - dx).
    """
    if dy == 0 and dx == 0:
        return patch
    h, w = patch.mask.shape
    py, px = abs(dy), abs(dx)
    img = np.pad(patch.image, ((0, 0), (py, py), (px, px)), mode="reflect")
    msk = np.pad(patch.mask, ((py, py), (px, px)), mode="reflect")
    y0, x0 = py - dy, px - dx
    return SamplePatch(img[:, y0 : y0 + h, x0 : x0 + w], msk[y0 : y0 + h, x0 : x0 + w])


def augment(patch: SamplePatch, rng: np.random.Generator, max_shift: int | None = None) -> SamplePatch:
    """Random quarter-turn rotation followed by a random reflect-padded shift."""
    h, w = patch.mask.shape
    if h != w:
        raise ContractError(f"augment expects a square patch, got {h}×{w}")
    if max_shift is None:
        max_shift = h // 8
    k = int(rng.integers(0, 4))
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    out = translate(rotate(patch, k), dy, dx)
    return SamplePatch(np.ascontiguousarray(out.image), np.ascontiguousarray(out.mask))


# synthetic data --------------------------------------------------------------

# shape family per class index: background texture, large rectangles,
# medium ellipses, round blobs, 4-8 px blobs, small rectangles
_SHAPES = ("background", "rect", "ellipse", "blob", "small", "smallrect")

_BASE_COLORS = np.array(
    [
        [0.55, 0.55, 0.55],
        [0.85, 0.30, 0.25],
        [0.45, 0.80, 0.35],
        [0.10, 0.40, 0.10],
        [0.95, 0.90, 0.10],
        [0.20, 0.20, 0.75],
    ]
)

DEFAULT_DENSITY = {1: 0.25, 2: 0.15, 3: 0.12, 4: 0.04, 5: 0.04}


@dataclass
class SynthSpec:
    num_tiles: int = 64
    tile_size: int = 64
    num_classes: int = 3
    # fraction of pixels targeted for each foreground class; class 0 fills the rest
    shape_density: dict[int, float] | None = None
    noise: float = 0.06
    in_channels: int = 3

    def densities(self) -> dict[int, float]:
        if self.shape_density is not None:
            return dict(self.shape_density)
        return {c: DEFAULT_DENSITY[c] for c in range(1, min(self.num_classes, 6))}

    def validate(self, palette: Palette = ISPRS_PALETTE) -> None:
        if self.num_tiles < 1:
            raise ContractError(f"num_tiles must be >= 1, got {self.num_tiles}")
        if self.tile_size < 8:
            raise ContractError(f"tile_size must be >= 8, got {self.tile_size}")
        if not 2 <= self.num_classes <= min(len(palette), len(_SHAPES)):
            raise ContractError(f"num_classes must be in [2, {min(len(palette), len(_SHAPES))}], got {self.num_classes}")
        dens = self.densities()
        if any(not 1 <= c < self.num_classes for c in dens):
            raise ContractError(f"density classes {sorted(dens)} must lie in [1, {self.num_classes})")
        if any(v < 0 for v in dens.values()) or sum(dens.values()) > 0.8:
            raise ContractError("densities must be non-negative and sum to at most 0.8")
        if self.in_channels < 1:
            raise ContractError("in_channels must be >= 1")


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "rect":
        h, w = rng.integers(size // 8, size // 4 + 1, size=2)
    elif kind == "smallrect":
        h, w = rng.integers(3, max(4, size // 10) + 1, size=2)
    elif kind == "small":
        h, w = rng.integers(4, 9, size=2)
    elif kind == "ellipse":
        h, w = rng.integers(size // 8, size // 5 + 1, size=2)
    else:
        h = w = int(rng.integers(size // 10, size // 6 + 1))
    h, w = max(int(h), 2), max(int(w), 2)
    y0 = int(rng.integers(0, size - h + 1))
    x0 = int(rng.integers(0, size - w + 1))
    if kind in ("rect", "smallrect"):
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    cy, cx = y0 + (h - 1) / 2, x0 + (w - 1) / 2
    return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0


def _synth_tile(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = spec.tile_size
    mask = np.zeros((size, size), dtype=np.uint8)
    area = size * size
    for cls, target in sorted(spec.densities().items()):
        kind = _SHAPES[cls]
        placed, attempts = 0, 0
        while placed < target * area and attempts < 400:
            attempts += 1
            region = _shape_mask(kind, size, rng) & (mask == 0)
            new = int(region.sum())
            if new == 0 or placed + new > target * area + 0.5 * new:
                continue
            mask[region] = cls
            placed += new

    colors = _BASE_COLORS[:, np.arange(spec.in_channels) % 3]
    image = colors[mask].transpose(2, 0, 1)
    # low-frequency texture plus per-pixel noise
    texture = rng.normal(0.0, 1.0, (spec.in_channels, size // 8 + 1, size // 8 + 1))
    texture = texture.repeat(8, axis=1).repeat(8, axis=2)[:, :size, :size]
    image = image + 0.03 * texture + rng.normal(0.0, spec.noise, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def synth_dataset(spec: SynthSpec, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic list of (C×S×S image in [0,1], S×S class mask) tiles.

    Each tile draws from its own stream derived from (seed, tile index).
    """
    spec.validate()
    return [_synth_tile(spec, np.random.default_rng([seed, i])) for i in range(spec.num_tiles)]


def class_frequencies(masks: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    counts = sum(np.bincount(_labels(m).ravel(), minlength=num_classes) for m in masks)
    return counts / counts.sum()


def derive_rng(*keys: int | str) -> np.random.Generator:
    """Generator seeded from a tuple of ints and/or strings."""
    ints = [k if isinstance(k, int) else zlib.crc32(k.encode("utf-8")) for k in keys]
    return np.random.default_rng(ints)
