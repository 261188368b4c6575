"""Synthetic training pairs: a clean image X, a partially modified copy X_hat
and the binary mask M of modified pixels.

A patch of random size and position is cut from X, warped with a smooth
random displacement field, restricted to a random shape, optionally shifted
in brightness, and pasted back.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates
from skimage.draw import polygon as draw_polygon

KINDS = ("elastic", "black", "swap")
SHAPE_STYLES = ("ellipse", "polygon", "blob")


class DistortionError(ValueError):
    pass


class DegenerateSample(Exception):
    """Raised when a composed sample leaves the image unchanged; draw again."""


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchGeometry:
    row: int
    col: int
    height: int
    width: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.row, self.row + self.height), slice(self.col, self.col + self.width)


@dataclass
class DistortionSample:
    x: np.ndarray      # clean target, HxWxC
    x_hat: np.ndarray  # network input, HxWxC
    mask: np.ndarray   # HxW, {0, 1}

    @property
    def complement(self) -> np.ndarray:
        return 1 - self.mask


@dataclass(frozen=True)
class DistortionConfig:
    kind: str = "elastic"
    # patch side as a fraction of min(H, W)
    patch_fraction: tuple[float, float] = (0.1, 0.35)
    alpha: tuple[float, float] = (2.0, 8.0)
    sigma: tuple[float, float] = (4.0, 12.0)
    shape_styles: tuple[str, ...] = SHAPE_STYLES
    brightness: tuple[float, float] = (-0.2, 0.2)
    n_patches: int = 1
    max_attempts: int = 16

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DistortionError(f"distortion kind must be one of {KINDS}")
        lo, hi = self.patch_fraction
        if not 0 < lo <= hi <= 1:
            raise DistortionError(f"invalid patch fraction range {self.patch_fraction}")
        if self.alpha[0] < 0 or self.alpha[0] > self.alpha[1]:
            raise DistortionError("alpha range must be non-negative and ordered")
        if self.sigma[0] <= 0 or self.sigma[0] > self.sigma[1]:
            raise DistortionError("sigma range must be positive and ordered")
        if self.brightness[0] > self.brightness[1]:
            raise DistortionError("brightness range must be ordered")
        bad = set(self.shape_styles) - set(SHAPE_STYLES)
        if bad or not self.shape_styles:
            raise DistortionError(f"unknown shape styles {sorted(bad)}")
        if self.n_patches < 1 or self.max_attempts < 1:
            raise DistortionError("n_patches and max_attempts must be positive")

    def size_range(self, dims: tuple[int, int]) -> tuple[int, int]:
        short = min(dims)
        lo = max(1, int(round(self.patch_fraction[0] * short)))
        hi = max(lo, int(round(self.patch_fraction[1] * short)))
        return lo, hi


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_patch_geometry(image_dims, size_range, seed) -> PatchGeometry:
    h, w = image_dims
    lo, hi = size_range
    if lo < 1 or lo > hi or hi > min(h, w):
        raise DistortionError(f"patch size range {size_range} infeasible for image {h}x{w}")
    rng = _rng(seed)
    ph = int(rng.integers(lo, hi + 1))
    pw = int(rng.integers(lo, hi + 1))
    row = int(rng.integers(0, h - ph + 1))
    col = int(rng.integers(0, w - pw + 1))
    return PatchGeometry(row, col, ph, pw)


def displacement_field(shape, alpha: float, sigma: float, seed) -> np.ndarray:
    """Smooth random field of shape (2, H, W) whose largest vector has length alpha."""
    if alpha < 0 or sigma <= 0:
        raise DistortionError("need alpha >= 0 and sigma > 0")
    rng = _rng(seed)
    h, w = shape
    field_ = rng.uniform(-1.0, 1.0, size=(2, h, w))
    field_ = np.stack([gaussian_filter(f, sigma, mode="reflect") for f in field_])
    peak = np.sqrt((field_ ** 2).sum(axis=0)).max()
    if peak == 0:
        return np.zeros_like(field_)
    return field_ * (alpha / peak)


def elastic_deform(patch: np.ndarray, alpha: float, sigma: float, seed) -> np.ndarray:
    h, w = patch.shape[:2]
    disp = displacement_field((h, w), alpha, sigma, seed)
    if alpha == 0:
        return patch.copy()
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([rows + disp[0], cols + disp[1]])
    chans = patch[..., None] if patch.ndim == 2 else patch
    out = np.stack(
        [map_coordinates(chans[..., c], coords, order=1, mode="nearest") for c in range(chans.shape[-1])],
        axis=-1,
    )
    out = np.clip(out, 0.0, 1.0).astype(patch.dtype)
    return out[..., 0] if patch.ndim == 2 else out


def _unit_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    # pixel centres mapped to (-1, 1)
    v = (np.arange(h) + 0.5) / h * 2 - 1
    u = (np.arange(w) + 0.5) / w * 2 - 1
    return np.meshgrid(v, u, indexing="ij")


def make_shape_mask(dims, style: str, seed) -> np.ndarray:
    h, w = dims
    if h < 1 or w < 1:
        raise DistortionError("shape mask needs at least one pixel")
    if style not in SHAPE_STYLES:
        raise DistortionError(f"unknown shape style {style!r}")
    rng = _rng(seed)
    if style == "ellipse":
        vv, uu = _unit_grid(h, w)
        a, b = rng.uniform(0.5, 1.0, size=2)
        cy, cx = rng.uniform(-0.25, 0.25, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = vv - cy, uu - cx
        r1 = (dy * np.cos(theta) + dx * np.sin(theta)) / a
        r2 = (-dy * np.sin(theta) + dx * np.cos(theta)) / b
        mask = (r1 ** 2 + r2 ** 2) <= 1.0
    elif style == "polygon":
        n = int(rng.integers(5, 10))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        radii = rng.uniform(0.4, 1.0, size=n)
        rr = (h - 1) / 2 + radii * np.sin(angles) * h / 2
        cc = (w - 1) / 2 + radii * np.cos(angles) * w / 2
        mask = np.zeros((h, w), bool)
        pr, pc = draw_polygon(rr, cc, shape=(h, w))
        mask[pr, pc] = True
    else:
        noise = gaussian_filter(rng.standard_normal((h, w)), max(1.0, min(h, w) / 6), mode="reflect")
        vv, uu = _unit_grid(h, w)
        envelope = np.exp(-2.0 * (vv ** 2 + uu ** 2))
        score = (noise - noise.mean()) / (noise.std() + 1e-12) + 2.0 * envelope
        mask = score >= np.quantile(score, rng.uniform(0.3, 0.7))
    mask = mask.astype(np.uint8)
    if not mask.any():
        mask[h // 2, w // 2] = 1
    return mask


def compose_distortion(x: np.ndarray, geometry: PatchGeometry, deformed: np.ndarray,
                       shape: np.ndarray, brightness_delta: float) -> DistortionSample:
    h, w = x.shape[:2]
    g = geometry
    if g.row < 0 or g.col < 0 or g.row + g.height > h or g.col + g.width > w:
        raise DistortionError(f"patch {g} outside image {h}x{w}")
    if deformed.shape[:2] != (g.height, g.width) or shape.shape != (g.height, g.width):
        raise DistortionError("deformed patch and shape mask must match the patch geometry")
    if not shape.any():
        raise DistortionError("shape mask is empty")

    mask = np.zeros((h, w), np.uint8)
    mask[g.slices] = shape.astype(np.uint8)
    x_hat = x.copy()
    content = np.clip(deformed + brightness_delta, 0.0, 1.0).astype(x.dtype)
    region = x_hat[g.slices]
    sel = shape.astype(bool)
    region[sel] = content[sel] if content.ndim == region.ndim else content[sel][..., None]
    if not np.any(x_hat != x):
        raise DegenerateSample("distorted patch is identical to the original content")
    return DistortionSample(x=x, x_hat=x_hat, mask=mask)


def _patch_content(x: np.ndarray, geometry: PatchGeometry, cfg: DistortionConfig, rng) -> tuple[np.ndarray, float]:
    patch = x[geometry.slices]
    if cfg.kind == "black":
        return np.zeros_like(patch), 0.0
    if cfg.kind == "swap":
        h, w = x.shape[:2]
        r = int(rng.integers(0, h - geometry.height + 1))
        c = int(rng.integers(0, w - geometry.width + 1))
        content = x[r : r + geometry.height, c : c + geometry.width].copy()
    else:
        alpha = rng.uniform(*cfg.alpha)
        sigma = rng.uniform(*cfg.sigma)
        content = elastic_deform(patch, alpha, sigma, rng)
    return content, float(rng.uniform(*cfg.brightness))


def generate_training_pair(x: np.ndarray, config: DistortionConfig | None = None, seed=0) -> DistortionSample:
    """Run the full pipeline, redrawing degenerate samples.

    With ``n_patches > 1`` the patches are pasted one after another and M is
    the union of their shapes.
    """
    cfg = config or DistortionConfig()
    rng = _rng(seed)
    dims = x.shape[:2]
    size_range = cfg.size_range(dims)
    for _ in range(cfg.max_attempts):
        x_hat = x.copy()
        mask = np.zeros(dims, np.uint8)
        for _ in range(cfg.n_patches):
            geometry = sample_patch_geometry(dims, size_range, rng)
            style = cfg.shape_styles[int(rng.integers(len(cfg.shape_styles)))]
            shape = make_shape_mask((geometry.height, geometry.width), style, rng)
            content, delta = _patch_content(x_hat, geometry, cfg, rng)
            try:
                part = compose_distortion(x_hat, geometry, content, shape, delta)
            except DegenerateSample:
                part = DistortionSample(x_hat, x_hat, np.zeros(dims, np.uint8))
                part.mask[geometry.slices] = shape
            x_hat = part.x_hat
            mask |= part.mask
        # pasted content that happens to equal X leaves M nonzero but X_hat == X
        if np.any(x_hat != x):
            return DistortionSample(x=x, x_hat=x_hat, mask=mask)
    raise GenerationError(f"no non-degenerate sample after {cfg.max_attempts} attempts")


def save_triptych(sample: DistortionSample, path: str | Path) -> None:
    """Write X | X_hat | M side by side as an 8-bit PNG."""
    from PIL import Image

    m = np.repeat(sample.mask[..., None].astype(np.float32), sample.x.shape[-1], axis=-1)
    strip = np.concatenate([sample.x, sample.x_hat, m], axis=1)
    Image.fromarray(np.round(np.clip(strip, 0, 1) * 255).astype(np.uint8).squeeze()).save(path)
