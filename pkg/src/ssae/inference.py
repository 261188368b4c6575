"""Anomaly heatmaps, smoothing and connected-component segmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .model import Autoencoder


@dataclass
class AnomalyHeatmap:
    values: np.ndarray  # HxW, >= 0
    sigma: float = 0.0
    source: str | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Component:
    area: int
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive)
    peak: float

    def to_dict(self) -> dict:
        return {"area": self.area, "bbox": list(self.bbox), "peak": self.peak}


@dataclass
class DetectionResult:
    mask: np.ndarray
    components: list[Component]
    anomalous: bool
    score: float


@dataclass(frozen=True)
class PostprocessConfig:
    sigma: float = 4.0
    threshold: float | None = None
    min_area: int = 16
    connectivity: int = 8

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.min_area < 1:
            raise ValueError("min_area must be at least 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.threshold is not None and self.threshold < 0:
            raise ValueError("threshold must be non-negative")

    @classmethod
    def for_side(cls, side: int, **kw) -> "PostprocessConfig":
        # 4 px at 512, proportionally smaller for smaller inputs
        return cls(sigma=4.0 * side / 512, **kw)


@dataclass
class Prediction:
    reconstruction: np.ndarray
    heatmap: AnomalyHeatmap
    result: DetectionResult | None


def heatmap(recon: np.ndarray, x: np.ndarray, source: str | None = None) -> AnomalyHeatmap:
    """Per-pixel Euclidean norm of the channel difference divided by sqrt(C)."""
    recon = np.asarray(recon, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if recon.shape != x.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {x.shape}")
    if x.ndim == 2:
        return AnomalyHeatmap(np.abs(recon - x), 0.0, source)
    c = x.shape[-1]
    values = np.sqrt(((recon - x) ** 2).sum(axis=-1) / c)
    return AnomalyHeatmap(values, 0.0, source)


def smooth(h: AnomalyHeatmap, sigma: float) -> AnomalyHeatmap:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return AnomalyHeatmap(h.values.copy(), 0.0, h.source)
    return AnomalyHeatmap(ndimage.gaussian_filter(h.values, sigma, mode="reflect"), float(sigma), h.source)


def _structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)


def label_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    return ndimage.label(mask, structure=_structure(connectivity))


def largest_component(mask: np.ndarray, connectivity: int = 8) -> int:
    labels, n = label_components(mask, connectivity)
    if n == 0:
        return 0
    return int(np.bincount(labels.ravel())[1:].max())


def segment(h: AnomalyHeatmap | np.ndarray, threshold: float, min_area: int, connectivity: int = 8) -> DetectionResult:
    values = h.values if isinstance(h, AnomalyHeatmap) else np.asarray(h)
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    if min_area < 1:
        raise ValueError("min_area must be at least 1")
    labels, n = label_components(values >= threshold, connectivity)
    keep = np.zeros(values.shape, bool)
    comps = []
    if n:
        areas = np.bincount(labels.ravel(), minlength=n + 1)
        for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
            if areas[lab] < min_area:
                continue
            region = labels[sl] == lab
            keep[sl] |= region
            comps.append(Component(
                area=int(areas[lab]),
                bbox=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop),
                peak=float(values[sl][region].max()),
            ))
    score = float(values.max()) if values.size else 0.0
    return DetectionResult(mask=keep, components=comps, anomalous=bool(comps), score=score)


def predict(net: Autoencoder, x: np.ndarray, post: PostprocessConfig, source: str | None = None) -> Prediction:
    """One forward pass on an unmodified HxWx3 image, then post-processing.

    Without a threshold in ``post`` only the reconstruction and smoothed
    heatmap are returned.
    """
    side = net.config.side
    if x.shape[:2] != (side, side):
        raise ValueError(f"image must be {side}x{side}, got {x.shape[0]}x{x.shape[1]}")
    net.eval()
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        recon = net(t)[0].permute(1, 2, 0).numpy()
    hm = smooth(heatmap(recon, x, source), post.sigma)
    result = None
    if post.threshold is not None:
        result = segment(hm, post.threshold, post.min_area, post.connectivity)
    return Prediction(recon, hm, result)


def write_outputs(pred: Prediction, out_dir: str | Path, stem: str) -> dict[str, Path]:
    """Reconstruction, viridis heatmap, raw heatmap (.npy), segmentation and component list."""
    from matplotlib import colormaps
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "reconstruction": out / f"{stem}_recon.png",
        "heatmap_png": out / f"{stem}_heatmap.png",
        "heatmap_raw": out / f"{stem}_heatmap.npy",
    }
    Image.fromarray(np.round(np.clip(pred.reconstruction, 0, 1) * 255).astype(np.uint8)).save(paths["reconstruction"])
    rgba = colormaps["viridis"](np.clip(pred.heatmap.values, 0, 1))
    Image.fromarray(np.round(rgba[..., :3] * 255).astype(np.uint8)).save(paths["heatmap_png"])
    np.save(paths["heatmap_raw"], pred.heatmap.values)
    if pred.result is not None:
        paths["segmentation"] = out / f"{stem}_segmentation.png"
        paths["components"] = out / f"{stem}_components.json"
        Image.fromarray(pred.result.mask.astype(np.uint8) * 255).save(paths["segmentation"])
        paths["components"].write_text(json.dumps({
            "anomalous": pred.result.anomalous,
            "score": pred.result.score,
            "components": [c.to_dict() for c in pred.result.components],
        }, indent=2))
    return paths
