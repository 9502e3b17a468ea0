"""Synthetic dataset generation, on-disk loading, splitting, and augmentation.

Dataset directory format: ``<root>/images/<id>.png`` and ``<root>/masks/<id>.png``,
8- or 16-bit grayscale PNG, mask nonzero = foreground.

All randomness flows through explicit ``numpy.random.Generator`` objects; the
same config + seed reproduces datasets and augmentations bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import DatasetSplits, Sample

_GRAYSCALE_MODES = {"L", "I", "I;16", "I;16B"}


@dataclass
class SyntheticDataConfig:
    count: int = 340
    height: int = 64
    width: int = 64
    shapes_min: int = 1
    shapes_max: int = 3
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.count <= 0:
            raise ValueError(f"count must be positive, got {self.count}")
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"height/width must be positive, got {self.height}x{self.width}")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ValueError(f"invalid shapes range {self.shapes_min}..{self.shapes_max}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass
class AugmentationConfig:
    """Per-op parameter ranges and apply probabilities.

    Spatial ops (translation, zoom, rotation) are composed into one affine
    applied identically to image and mask (nearest-neighbor for the mask,
    reflect padding). Intensity ops touch the image only. Scalar ranges mean
    symmetric (rotation, translation) sampling; pass a (lo, hi) tuple to pin an
    exact value, e.g. ``rotate_deg=(360.0, 360.0)``.
    """

    translate_frac: float | tuple[float, float] = 0.10
    p_translate: float = 0.2
    zoom_range: tuple[float, float] = (0.9, 1.1)
    p_zoom: float = 0.2
    rotate_deg: float | tuple[float, float] = 15.0
    p_rotate: float = 0.2
    noise_std: float = 0.1
    p_noise: float = 0.15
    blur_sigma: tuple[float, float] = (0.5, 1.0)
    p_blur: float = 0.15
    brightness_range: tuple[float, float] = (0.75, 1.25)
    p_brightness: float = 0.15
    contrast_range: tuple[float, float] = (0.75, 1.25)
    p_contrast: float = 0.15
    gamma_range: tuple[float, float] = (0.7, 1.5)
    p_gamma: float = 0.3

    def __post_init__(self) -> None:
        for name in ("p_translate", "p_zoom", "p_rotate", "p_noise", "p_blur",
                     "p_brightness", "p_contrast", "p_gamma"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")
        for name in ("translate_frac", "zoom_range", "rotate_deg", "noise_std",
                     "blur_sigma", "brightness_range", "contrast_range", "gamma_range"):
            value = getattr(self, name)
            bounds = value if isinstance(value, tuple) else (value,)
            if not all(math.isfinite(v) for v in bounds):
                raise ValueError(f"{name} must be finite, got {value}")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(p_translate=0, p_zoom=0, p_rotate=0, p_noise=0, p_blur=0,
                   p_brightness=0, p_contrast=0, p_gamma=0)


def _sym_range(value: float | tuple[float, float]) -> tuple[float, float]:
    if isinstance(value, tuple):
        return value
    return (-value, value)


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int = 8) -> np.ndarray:
    """Smooth texture in [0,1]: a coarse random grid bilinearly upsampled."""
    ch = max(2, math.ceil(h / cell) + 1)
    cw = max(2, math.ceil(w / cell) + 1)
    coarse = rng.random((ch, cw))
    rows = np.linspace(0.0, ch - 1.0, h)
    cols = np.linspace(0.0, cw - 1.0, w)
    grid = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(coarse, grid, order=1, mode="nearest")


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ay: float, ax: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return (u / ay) ** 2 + (v / ax) ** 2 <= 1.0


def _anatomy_band(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Dim elliptical ring near the image center, a canonical-structure stand-in.

    Real medical images carry anatomy with a roughly fixed layout; patch parts
    of the ring point toward their quadrant, which is what position-based
    pretext tasks feed on (appearance-normalizing encoders erase plain
    intensity ramps, so the cue must be structural).
    """
    cy = h / 2 + rng.uniform(-h / 16, h / 16)
    cx = w / 2 + rng.uniform(-w / 16, w / 16)
    ry = rng.uniform(0.30, 0.36) * h
    rx = rng.uniform(0.34, 0.40) * w
    angle = rng.uniform(-0.17, 0.17)
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = c * dy + s * dx
    v = -s * dy + c * dx
    radial = (u / ry) ** 2 + (v / rx) ** 2
    return np.abs(radial - 1.0) <= 0.18


def generate_synthetic(cfg: SyntheticDataConfig) -> list[Sample]:
    """Textured backgrounds with 1..shapes_max brighter filled ellipses.

    Background intensities stay below 0.45 + noise and foreground above 0.55,
    so the classes are separable by construction. A fixed directional intensity
    ramp plus a dim near-center elliptical band make absolute position
    inferable from local appearance. Each mask's foreground fraction is kept
    inside (0, 0.5) by rejection resampling.
    """
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = 0.05 * (yy / max(h - 1, 1)) + 0.08 * (xx / max(w - 1, 1))
    samples: list[Sample] = []
    for i in range(cfg.count):
        for _attempt in range(100):
            background = 0.04 + 0.20 * _value_noise(rng, h, w) + ramp
            background[_anatomy_band(h, w, rng)] += 0.12
            image = background.copy()
            mask = np.zeros((h, w), dtype=np.uint8)
            n_shapes = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
            for _ in range(n_shapes):
                cy = rng.uniform(0.15, 0.85) * h
                cx = rng.uniform(0.15, 0.85) * w
                ay = rng.uniform(h / 16, h / 5)
                ax = rng.uniform(w / 16, w / 5)
                angle = rng.uniform(0.0, math.pi)
                intensity = rng.uniform(0.55, 0.95)
                ellipse = _ellipse_mask(h, w, cy, cx, ay, ax, angle)
                image[ellipse] = intensity
                mask[ellipse] = 1
            fraction = mask.mean()
            if 0.0 < fraction < 0.5:
                break
        else:
            raise RuntimeError(f"could not draw a mask with foreground fraction in (0,0.5) for sample {i}")
        if cfg.noise_std > 0:
            image = image + rng.normal(0.0, cfg.noise_std, (h, w))
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        samples.append(Sample(image=image, mask=mask, id=f"synth-{i:05d}"))
    return samples


def _load_grayscale(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in _GRAYSCALE_MODES:
            raise ValueError(f"non-grayscale file {path} (mode {img.mode})")
        arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32) / 65535.0


def load_directory(path: str | Path) -> list[Sample]:
    """Load image/mask pairs; images scaled to [0,1], masks binarized (nonzero -> 1)."""
    root = Path(path)
    if not root.exists():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.exists():
        return []
    samples = []
    for image_path in sorted(images_dir.glob("*.png")):
        stem = image_path.stem
        mask_path = masks_dir / f"{stem}.png"
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask for image '{stem}' (expected {mask_path})")
        image = np.clip(_load_grayscale(image_path), 0.0, 1.0)
        mask = (_load_grayscale(mask_path) > 0).astype(np.uint8)
        samples.append(Sample(image=image, mask=mask, id=stem))
    return samples


def save_dataset(samples: list[Sample], path: str | Path, force: bool = False) -> None:
    """Write samples in the dataset directory format as 8-bit PNG."""
    root = Path(path)
    images_dir = root / "images"
    masks_dir = root / "masks"
    if images_dir.exists() and any(images_dir.iterdir()) and not force:
        raise FileExistsError(f"refusing to overwrite non-empty dataset at {root} (use force)")
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        if s.mask is None:
            raise ValueError(f"sample '{s.id}' has no mask")
        Image.fromarray(np.round(s.image * 255).astype(np.uint8), "L").save(images_dir / f"{s.id}.png")
        Image.fromarray((s.mask * 255).astype(np.uint8), "L").save(masks_dir / f"{s.id}.png")


def split(samples: list[Sample], fractions: tuple[float, float, float], seed: int) -> DatasetSplits:
    """Deterministic shuffle-and-partition.

    val/test sizes are fraction·n rounded to nearest (ties up); the remainder
    goes to train.
    """
    n = len(samples)
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    f_train, f_val, f_test = fractions
    if f_train <= 0 or f_val <= 0 or f_test <= 0:
        raise ValueError(f"fractions must be positive, got {fractions}")
    total = f_train + f_val + f_test
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {total}")
    n_val = int(math.floor(f_val * n + 0.5))
    n_test = int(math.floor(f_test * n + 0.5))
    n_train = n - n_val - n_test
    if n_train <= 0:
        raise ValueError(f"rounded split leaves no training samples ({n_train}/{n_val}/{n_test})")
    order = np.random.default_rng(seed).permutation(n)
    picked = [samples[i] for i in order]
    return DatasetSplits(
        train=picked[:n_train],
        val=picked[n_train:n_train + n_val],
        test=picked[n_train + n_val:],
    )


def _apply_spatial(image: np.ndarray, mask: np.ndarray | None, cfg: AugmentationConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    h, w = image.shape
    shift = np.zeros(2)
    scale = 1.0
    angle = 0.0
    applied = False
    if rng.random() < cfg.p_translate:
        lo, hi = _sym_range(cfg.translate_frac)
        shift = np.array([rng.uniform(lo, hi) * h, rng.uniform(lo, hi) * w])
        applied = True
    if rng.random() < cfg.p_zoom:
        scale = rng.uniform(*cfg.zoom_range)
        applied = True
    if rng.random() < cfg.p_rotate:
        lo, hi = _sym_range(cfg.rotate_deg)
        angle = math.radians(rng.uniform(lo, hi))
        applied = True
    if not applied:
        return image, mask
    # Inverse map for p_out = center + shift + scale·R(angle)·(p_in - center).
    c, s = math.cos(angle), math.sin(angle)
    matrix = np.array([[c, -s], [s, c]]) / scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ (center + shift)
    out_image = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="reflect")
    out_mask = None
    if mask is not None:
        out_mask = ndimage.affine_transform(mask, matrix, offset=offset, order=0, mode="reflect")
        out_mask = (out_mask > 0).astype(np.uint8)
    return out_image, out_mask


def apply_intensity(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Intensity jitter chain (noise, blur, brightness, contrast, gamma); clips to [0,1]."""
    if rng.random() < cfg.p_noise:
        std = rng.uniform(0.0, cfg.noise_std)
        image = image + rng.normal(0.0, std, image.shape)
    if rng.random() < cfg.p_blur:
        sigma = rng.uniform(*cfg.blur_sigma)
        image = ndimage.gaussian_filter(image, sigma)
    if rng.random() < cfg.p_brightness:
        image = image * rng.uniform(*cfg.brightness_range)
    if rng.random() < cfg.p_contrast:
        factor = rng.uniform(*cfg.contrast_range)
        mean = image.mean()
        image = mean + (image - mean) * factor
    if rng.random() < cfg.p_gamma:
        gamma = rng.uniform(*cfg.gamma_range)
        image = np.clip(image, 0.0, 1.0) ** gamma
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def augment(sample: Sample, cfg: AugmentationConfig, rng: np.random.Generator) -> Sample:
    """Spatially transform image+mask together, then jitter the image's intensity."""
    image, mask = _apply_spatial(sample.image, sample.mask, cfg, rng)
    image = apply_intensity(image, cfg, rng)
    return Sample(image=image, mask=mask, id=sample.id)
