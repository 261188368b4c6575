"""Training objectives over (F(X_hat), X, X_hat, M).

All tensors are NCHW. ``mask`` is binary and may have a single channel, in
which case it is broadcast over the image channels; element counts such as
``|M|_1`` always include the channel dimension.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

VARIANTS = ("v1", "v2", "v3")


@dataclass(frozen=True)
class ObjectiveConfig:
    variant: str = "v1"
    lam: float = 0.5
    eps: float = 1e-12

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"objective variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def _safe_norm(sq_sum: torch.Tensor) -> torch.Tensor:
    # exact sqrt with a zero (sub)gradient at the origin instead of NaN
    positive = sq_sum > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq_sum, torch.ones_like(sq_sum))), torch.zeros_like(sq_sum))


def _prepare(recon: torch.Tensor, x: torch.Tensor, mask: torch.Tensor):
    if recon.shape != x.shape:
        raise ValueError(f"shape mismatch: recon {tuple(recon.shape)} vs target {tuple(x.shape)}")
    if recon.dim() == 3:
        recon, x = recon.unsqueeze(0), x.unsqueeze(0)
        mask = mask.unsqueeze(0)
    if mask.dim() == 3:
        mask = mask.unsqueeze(1)
    mask = mask.to(recon.dtype).expand_as(recon)
    n_in = mask.sum(dim=(1, 2, 3))
    n_out = (1.0 - mask).sum(dim=(1, 2, 3))
    if bool((n_in == 0).any()) or bool((n_out == 0).any()):
        raise ValueError("mask must be neither all zeros nor all ones")
    return recon, x, mask, n_in, n_out


def _terms(recon, x, mask, lam):
    recon, x, mask, n_in, n_out = _prepare(recon, x, mask)
    diff = recon - x
    outside = _safe_norm(((1.0 - mask) * diff).pow(2).sum(dim=(1, 2, 3)))
    inside = _safe_norm((mask * diff).pow(2).sum(dim=(1, 2, 3)))
    return lam / n_out * outside, (1.0 - lam) / n_in * inside


def loss_v1(recon, x, mask, lam: float = 0.5, reduction: str = "mean") -> torch.Tensor:
    first, second = _terms(recon, x, mask, lam)
    return _reduce(first + second, reduction)


def loss_v2(recon, x, mask, lam: float = 0.5, reduction: str = "mean") -> torch.Tensor:
    first, second = _terms(recon, x, mask, lam)
    return _reduce(first - second, reduction)


def loss_v3(recon, x, x_hat, mask, lam: float = 0.5, eps: float = 1e-12, reduction: str = "mean") -> torch.Tensor:
    """Like ``loss_v2`` but the reward is weighted by ``|X_hat - X|``.

    Elements where the distorted input equals the original carry zero weight
    in the second term, so the network gains nothing by corrupting them.
    """
    recon, x, mask, _, n_out = _prepare(recon, x, mask)
    if x_hat.dim() == 3:
        x_hat = x_hat.unsqueeze(0)
    if x_hat.shape != x.shape:
        raise ValueError("distorted input must match the target shape")
    weight = (x_hat - x).abs().to(recon.dtype)
    w_sum = weight.sum(dim=(1, 2, 3))
    if bool((w_sum <= eps).any()):
        raise ValueError("distorted input is identical to the target (|X_hat - X|_1 <= eps)")
    diff = recon - x
    first = lam / n_out * _safe_norm(((1.0 - mask) * diff).pow(2).sum(dim=(1, 2, 3)))
    second = (1.0 - lam) / w_sum * _safe_norm((weight * diff).pow(2).sum(dim=(1, 2, 3)))
    return _reduce(first - second, reduction)


def _reduce(per_sample: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def compute_loss(cfg: ObjectiveConfig, recon, x, x_hat, mask, reduction: str = "mean") -> torch.Tensor:
    if cfg.variant == "v1":
        return loss_v1(recon, x, mask, cfg.lam, reduction)
    if cfg.variant == "v2":
        return loss_v2(recon, x, mask, cfg.lam, reduction)
    return loss_v3(recon, x, x_hat, mask, cfg.lam, cfg.eps, reduction)


def warn_if_untuned(cfg: ObjectiveConfig) -> None:
    if cfg.variant in ("v2", "v3"):
        warnings.warn(
            f"objective {cfg.variant} is sensitive to lambda (using {cfg.lam}); "
            "keep early stopping enabled",
            stacklevel=2,
        )
