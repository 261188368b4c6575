"""Dataset indexing, image decoding, geometric augmentation and procedurally
generated texture datasets in the MVTec AD directory layout::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect or good>/*.png
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter
from skimage.draw import disk, polygon as draw_polygon
from skimage.transform import resize

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
GOOD = "good"


class IndexingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    image: Path
    mask: Path | None
    label: str

    @property
    def anomalous(self) -> bool:
        return self.label != GOOD


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    category: str
    train: tuple[Record, ...]
    validation: tuple[Record, ...]
    test: tuple[Record, ...]

    def split(self, name: str) -> tuple[Record, ...]:
        if name not in ("train", "validation", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def load_image(path: str | Path) -> np.ndarray:
    """Decode to float32 HxWx3 in [0, 1]; grayscale is replicated to 3 channels."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise IndexingError(f"cannot read image {path}: {exc}") from exc
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = arr.astype(np.float32) / 65535.0
    elif arr.dtype == np.bool_:
        arr = arr.astype(np.float32)
    else:
        arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    elif arr.shape[-1] == 4:
        arr = arr[..., :3]
    elif arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    return np.clip(arr, 0.0, 1.0)


def load_mask(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise IndexingError(f"cannot read mask {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr.max(axis=-1)
    return arr > 0


def resize_image(img: np.ndarray, side: int) -> np.ndarray:
    if img.shape[0] == side and img.shape[1] == side:
        return img
    out = resize(img, (side, side), order=1, anti_aliasing=True, preserve_range=True)
    return np.clip(out, 0, 1).astype(np.float32)


def resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    if mask.shape == (side, side):
        return mask
    return resize(mask.astype(np.float32), (side, side), order=0, anti_aliasing=False) > 0.5


def _image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            im.verify()
        with Image.open(path) as im:
            return im.size
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise IndexingError(f"cannot read image {path}: {exc}") from exc


def _images_in(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def scan_dataset(root: str | Path, category: str, val_fraction: float = 0.1, seed: int = 0) -> DatasetIndex:
    """Index a category directory.

    A seeded ``val_fraction`` of ``train/good`` is held out as the normal-only
    validation split used for threshold calibration.
    """
    root = Path(root)
    cat = root / category
    if not cat.is_dir():
        raise IndexingError(f"category directory not found: {cat}")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must lie in [0, 1)")

    train_dir = cat / "train" / GOOD
    if not train_dir.is_dir():
        raise IndexingError(f"missing training folder {train_dir}")
    train = []
    for p in _images_in(train_dir):
        _image_size(p)
        train.append(Record(p, None, GOOD))

    test = []
    test_dir = cat / "test"
    if test_dir.is_dir():
        for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            label = defect_dir.name
            for p in _images_in(defect_dir):
                size = _image_size(p)
                mask = None
                if label != GOOD:
                    mask = cat / "ground_truth" / label / f"{p.stem}_mask.png"
                    if not mask.is_file():
                        raise IndexingError(f"missing ground-truth mask for {p} (expected {mask})")
                    if _image_size(mask) != size:
                        raise IndexingError(f"mask {mask} does not match the size of {p}")
                test.append(Record(p, mask, label))

    n_val = int(round(val_fraction * len(train)))
    if val_fraction > 0 and len(train) > 1:
        n_val = min(max(n_val, 1), len(train) - 1)
    order = np.random.default_rng(seed).permutation(len(train))
    val_idx = set(order[:n_val].tolist())
    validation = tuple(r for i, r in enumerate(train) if i in val_idx)
    train_kept = tuple(r for i, r in enumerate(train) if i not in val_idx)
    return DatasetIndex(root, category, train_kept, validation, tuple(test))


# --- augmentation -----------------------------------------------------------

_OPS = {
    # quarter turns are clockwise: [[a, b], [c, d]] -> [[c, a], [d, b]]
    "rot90": lambda a: np.rot90(a, k=-1),
    "hflip": lambda a: a[:, ::-1],
    "vflip": lambda a: a[::-1, :],
}


@dataclass(frozen=True)
class AugmentationPolicy:
    rotations: tuple[int, ...] = (0,)
    hflip: bool = False
    vflip: bool = False

    def __post_init__(self) -> None:
        rots = tuple(sorted(set(int(r) % 360 for r in self.rotations) | {0}))
        if any(r not in (0, 90, 180, 270) for r in rots):
            raise ConfigError(f"rotations must be multiples of 90 degrees, got {self.rotations}")
        object.__setattr__(self, "rotations", rots)

    @property
    def quarter_turns(self) -> bool:
        return 90 in self.rotations or 270 in self.rotations

    def generators(self) -> list[tuple[str, ...]]:
        gens = [("rot90",) * (r // 90) for r in self.rotations if r]
        if self.hflip:
            gens.append(("hflip",))
        if self.vflip:
            gens.append(("vflip",))
        return gens

    def elements(self) -> list[tuple[str, ...]]:
        """Distinct transforms of the group generated by the policy, identity first."""
        probe = np.arange(12).reshape(3, 4)
        if self.quarter_turns:
            probe = np.arange(16).reshape(4, 4)

        def apply(ops, a):
            for op in ops:
                a = _OPS[op](a)
            return a

        seen = {probe.tobytes() + bytes(probe.shape): ()}
        frontier = [()]
        while frontier:
            nxt = []
            for word in frontier:
                for g in self.generators():
                    cand = word + g
                    out = apply(cand, probe)
                    key = out.tobytes() + bytes(out.shape)
                    if key not in seen:
                        seen[key] = cand
                        nxt.append(cand)
            frontier = nxt
        return list(seen.values())


def apply_transform(image: np.ndarray, ops: tuple[str, ...]) -> np.ndarray:
    for op in ops:
        image = _OPS[op](image)
    return np.ascontiguousarray(image)


def augment(image: np.ndarray, policy: AugmentationPolicy, seed) -> np.ndarray:
    if policy.quarter_turns and image.shape[0] != image.shape[1]:
        raise ConfigError(f"quarter-turn rotations need a square image, got {image.shape[:2]}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    elements = policy.elements()
    return apply_transform(image, elements[int(rng.integers(len(elements)))])


# --- synthetic textures ------------------------------------------------------

TEXTURES = ("stripes", "checker", "noise")
INJECTORS = ("blob", "scratch", "warp", "faint")


@dataclass(frozen=True)
class TextureSpec:
    """Procedural texture plus the defect types planted in the test split.

    ``faint`` defects are low-contrast: a smooth region where the pattern is
    flattened toward its mean and slightly tinted.
    """

    texture: str = "stripes"
    category: str = "stripes"
    side: int = 128
    period: tuple[float, float] = (10.0, 14.0)
    angle: tuple[float, float] = (-8.0, 8.0)
    amplitude: float = 0.35
    noise: float = 0.03
    tint: tuple[float, float, float] = (1.0, 0.85, 0.65)
    injectors: tuple[str, ...] = ("blob", "scratch")
    defect_size: tuple[float, float] = (0.08, 0.2)
    anomaly_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.texture not in TEXTURES:
            raise ConfigError(f"texture must be one of {TEXTURES}")
        bad = set(self.injectors) - set(INJECTORS)
        if bad:
            raise ConfigError(f"unknown injectors {sorted(bad)}")
        if not 0 <= self.anomaly_fraction <= 1:
            raise ConfigError("anomaly_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "stripes": TextureSpec(),
    "checker": TextureSpec(texture="checker", category="checker"),
    "noise": TextureSpec(texture="noise", category="noise", amplitude=0.3),
    "stripes_faint": TextureSpec(category="stripes_faint", injectors=("faint",), defect_size=(0.12, 0.25)),
}


def render_texture(spec: TextureSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.side
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    period = rng.uniform(*spec.period)
    theta = np.deg2rad(rng.uniform(*spec.angle))
    phase = rng.uniform(0, 2 * np.pi)
    if spec.texture == "stripes":
        u = xx * np.cos(theta) + yy * np.sin(theta)
        base = np.sin(2 * np.pi * u / period + phase)
    elif spec.texture == "checker":
        u = xx * np.cos(theta) + yy * np.sin(theta)
        v = -xx * np.sin(theta) + yy * np.cos(theta)
        base = np.sign(np.sin(np.pi * u / period + phase) * np.sin(np.pi * v / period + phase)) * 0.8
        base = gaussian_filter(base, 0.7)
    else:
        base = gaussian_filter(rng.standard_normal((n, n)), period / 4, mode="wrap")
        base = base / (np.abs(base).max() + 1e-12)
    gray = 0.5 + spec.amplitude * base
    img = np.stack([gray * t + (1 - t) * 0.5 for t in spec.tint], axis=-1)
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _random_region(n: int, size: tuple[float, float], rng) -> np.ndarray:
    radius = rng.uniform(*size) * n / 2
    cy, cx = rng.uniform(radius + 2, n - radius - 2, size=2)
    k = int(rng.integers(6, 11))
    ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    rad = radius * rng.uniform(0.6, 1.0, k)
    mask = np.zeros((n, n), bool)
    rr, cc = draw_polygon(cy + rad * np.sin(ang), cx + rad * np.cos(ang), shape=(n, n))
    mask[rr, cc] = True
    if not mask.any():
        rr, cc = disk((cy, cx), max(radius, 1.5), shape=(n, n))
        mask[rr, cc] = True
    return mask


def inject_anomaly(img: np.ndarray, kind: str, spec: TextureSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Plant one defect; returns (image, mask). The image changes only on the mask."""
    n = img.shape[0]
    out = img.copy()
    if kind == "scratch":
        length = rng.uniform(0.25, 0.5) * n
        ang = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0.3 * n, 0.7 * n, 2)
        dy, dx = np.sin(ang) * length / 2, np.cos(ang) * length / 2
        half = rng.uniform(1.0, 2.0)
        ny, nx = np.cos(ang) * half, -np.sin(ang) * half
        rr = [cy - dy + ny, cy + dy + ny, cy + dy - ny, cy - dy - ny]
        cc = [cx - dx + nx, cx + dx + nx, cx + dx - nx, cx - dx - nx]
        mask = np.zeros((n, n), bool)
        pr, pc = draw_polygon(rr, cc, shape=(n, n))
        mask[pr, pc] = True
        value = 0.97 if img[mask].mean() < 0.5 else 0.03
        out[mask] = value
    elif kind == "blob":
        mask = _random_region(n, spec.defect_size, rng)
        level = img[mask].mean()
        value = rng.uniform(0.85, 0.97) if level < 0.5 else rng.uniform(0.03, 0.15)
        color = np.clip(value * np.array([1.0, rng.uniform(0.6, 1.0), rng.uniform(0.3, 1.0)]), 0, 1)
        out[mask] = color
    elif kind == "warp":
        mask = _random_region(n, spec.defect_size, rng)
        shift = rng.uniform(0.3, 0.5) * spec.period[0]
        rolled = np.roll(img, int(round(shift)), axis=1)
        out[mask] = rolled[mask]
    else:  # faint
        mask = _random_region(n, spec.defect_size, rng)
        mean = img[mask].mean(axis=0)
        flatten = rng.uniform(0.45, 0.6)
        out[mask] = img[mask] * (1 - flatten) + mean * flatten + rng.uniform(0.03, 0.06)
    np.clip(out, 0.0, 1.0, out=out)
    return out, mask


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def make_synthetic_texture_set(spec: TextureSpec, n_train: int, n_test: int, out_dir: str | Path,
                               seed: int = 0, val_fraction: float = 0.1) -> DatasetIndex:
    """Write a texture category under ``out_dir/spec.category`` and index it.

    The test split holds ``round(anomaly_fraction * n_test)`` defective images,
    each with an exact ground-truth mask, and clean images for the rest.
    """
    n_bad = int(round(spec.anomaly_fraction * n_test))
    if n_bad and not spec.injectors:
        raise ConfigError("anomalous test images requested but no injectors configured")
    if n_train < 1 or n_test < 0:
        raise ConfigError("need n_train >= 1 and n_test >= 0")
    rng = np.random.default_rng(seed)
    cat = Path(out_dir) / spec.category
    train_dir = cat / "train" / GOOD
    train_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_train):
        Image.fromarray(_to_u8(render_texture(spec, rng))).save(train_dir / f"{i:03d}.png")

    good_dir = cat / "test" / GOOD
    good_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_test - n_bad):
        Image.fromarray(_to_u8(render_texture(spec, rng))).save(good_dir / f"{i:03d}.png")

    counters: dict[str, int] = {}
    for _ in range(n_bad):
        kind = spec.injectors[int(rng.integers(len(spec.injectors)))]
        img, mask = inject_anomaly(render_texture(spec, rng), kind, spec, rng)
        idx = counters.get(kind, 0)
        counters[kind] = idx + 1
        img_dir = cat / "test" / kind
        gt_dir = cat / "ground_truth" / kind
        img_dir.mkdir(parents=True, exist_ok=True)
        gt_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(_to_u8(img)).save(img_dir / f"{idx:03d}.png")
        Image.fromarray((mask * 255).astype(np.uint8)).save(gt_dir / f"{idx:03d}_mask.png")
    return scan_dataset(out_dir, spec.category, val_fraction=val_fraction, seed=seed)
