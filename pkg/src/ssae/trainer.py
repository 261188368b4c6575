"""Self-supervised training loop.

Every step draws clean images from the training split, distorts them on the
fly and fits F(X_hat) to X under the configured objective. Randomness for a
step comes from ``(seed, step)`` alone, so a run resumed from a checkpoint
follows the same trajectory as an uninterrupted one.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import AugmentationPolicy, DatasetIndex, augment, load_image, resize_image
from .distortion import DistortionConfig, generate_training_pair
from .model import Autoencoder, ModelConfig, build, read_checkpoint, save_weights
from .objectives import ObjectiveConfig, compute_loss, warn_if_untuned

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "side", "train_loss", "val_criterion")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    lr: float = 1e-4
    batch_size: int = 8
    schedule: tuple[tuple[int, int], ...] = ((128, 2000), (256, 2000), (512, 2000))
    distortion: DistortionConfig = field(default_factory=DistortionConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    val_every: int = 100
    early_stopping: bool | None = None  # None: on for v2/v3
    patience: int = 5
    keep_best: bool | None = None  # None: on for v2/v3
    seed: int = 0
    val_seed: int = 1234

    def __post_init__(self) -> None:
        sched = tuple((int(s), int(n)) for s, n in self.schedule)
        object.__setattr__(self, "schedule", sched)
        if not sched:
            raise ConfigError("schedule must not be empty")
        for side, steps in sched:
            if side <= 0 or side % 8:
                raise ConfigError(f"schedule side {side} is not a positive multiple of 8")
            if steps <= 0:
                raise ConfigError(f"schedule step count must be positive, got {steps}")
        if any(b[0] < a[0] for a, b in zip(sched, sched[1:])):
            raise ConfigError("schedule sides must be non-decreasing")
        if self.lr <= 0 or self.batch_size <= 0 or self.patience <= 0 or self.val_every < 0:
            raise ConfigError("lr, batch_size and patience must be positive; val_every non-negative")

    @property
    def total_steps(self) -> int:
        return sum(n for _, n in self.schedule)

    @property
    def use_early_stopping(self) -> bool:
        if self.early_stopping is None:
            return self.objective.variant != "v1"
        return self.early_stopping

    @property
    def use_best(self) -> bool:
        if self.keep_best is None:
            return self.objective.variant != "v1"
        return self.keep_best

    def side_at(self, step: int) -> int:
        end = 0
        for side, n in self.schedule:
            end += n
            if step < end:
                return side
        return self.schedule[-1][0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [list(s) for s in self.schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["objective"] = ObjectiveConfig(**d.get("objective", {}))
        dist = dict(d.get("distortion", {}))
        for k in ("patch_fraction", "alpha", "sigma", "shape_styles", "brightness"):
            if k in dist:
                dist[k] = tuple(dist[k])
        d["distortion"] = DistortionConfig(**dist)
        aug = dict(d.get("augmentation", {}))
        if "rotations" in aug:
            aug["rotations"] = tuple(aug["rotations"])
        d["augmentation"] = AugmentationPolicy(**aug)
        d["schedule"] = tuple(tuple(s) for s in d.get("schedule", cls.schedule))
        return cls(**d)


@dataclass
class TrainState:
    step: int = 0
    side: int = 0
    best_value: float = math.inf
    best_step: int = -1
    best_side: int = 0
    evals_since_best: int = 0
    stopped_early: bool = False
    checkpoints: list[str] = field(default_factory=list)
    history: list[tuple[int, int, float, float | None]] = field(default_factory=list)
    provenance: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["history"] = [list(r) for r in self.history]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        d = dict(d)
        d["history"] = [tuple(r) for r in d.get("history", [])]
        return cls(**d)


def _load_split(records, side: int) -> list[np.ndarray]:
    return [resize_image(load_image(r.image), side) for r in records]


def _to_tensor(arrs: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrs).astype(np.float32)).permute(0, 3, 1, 2)


def make_batch(images: list[np.ndarray], cfg: TrainConfig, step: int):
    """Distorted batch for one step: (x_hat, x, mask) tensors plus image indices."""
    rng = np.random.default_rng([cfg.seed, step])
    picks = rng.integers(len(images), size=cfg.batch_size)
    xs, xh, ms = [], [], []
    for i in picks:
        x = augment(images[i], cfg.augmentation, rng)
        s = generate_training_pair(x, cfg.distortion, rng)
        xs.append(s.x)
        xh.append(s.x_hat)
        ms.append(s.mask[..., None].astype(np.float32))
    return _to_tensor(xh), _to_tensor(xs), _to_tensor(ms), picks


def validation_criterion(net: Autoencoder, images: list[np.ndarray], cfg: TrainConfig) -> float:
    """v1: mean RMS reconstruction error on clean images.
    v2/v3: mean objective on validation images distorted with a fixed seed."""
    if not images:
        raise TrainingError("validation set is empty")
    was_training = net.training
    net.eval()
    values = []
    with torch.no_grad():
        for i, img in enumerate(images):
            if cfg.objective.variant == "v1":
                x = _to_tensor([img])
                values.append(float(torch.sqrt(((net(x) - x) ** 2).mean())))
            else:
                s = generate_training_pair(img, cfg.distortion, np.random.default_rng([cfg.val_seed, i]))
                x_hat, x, m = _to_tensor([s.x_hat]), _to_tensor([s.x]), _to_tensor([s.mask[..., None].astype(np.float32)])
                values.append(float(compute_loss(cfg.objective, net(x_hat), x, x_hat, m)))
    net.train(was_training)
    return float(np.mean(values))


def _check_provenance(index: DatasetIndex) -> None:
    train = {r.image for r in index.train}
    held = {r.image for r in index.validation} | {r.image for r in index.test}
    if train & held:
        raise TrainingError(f"training split overlaps validation/test: {sorted(map(str, train & held))[:3]}")


def save_training_checkpoint(path: Path, net: Autoencoder, opt: torch.optim.Optimizer,
                             state: TrainState, cfg: TrainConfig) -> None:
    save_weights(net, path, extra={"optimizer": opt.state_dict(), "state": state.to_dict(), "train_config": cfg.to_dict()})


def write_loss_log(path: str | Path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for step, side, loss, val in history:
            w.writerow([step, side, f"{loss:.9g}", "" if val is None else f"{val:.9g}"])


def train(index: DatasetIndex, model_cfg: ModelConfig, cfg: TrainConfig,
          checkpoint_dir: str | Path | None = None, resume_from: str | Path | None = None,
          stop_after: int | None = None, on_step: Callable | None = None) -> tuple[Autoencoder, TrainState]:
    """Train a network; returns it with the final state.

    ``stop_after`` halts after that many global steps (used to interrupt and
    resume). Objectives other than v1 restore the best-validation weights at
    the end unless ``keep_best`` is False.
    """
    if not index.train:
        raise TrainingError("training split is empty")
    if cfg.schedule[-1][0] != model_cfg.side:
        raise ConfigError(f"final schedule side {cfg.schedule[-1][0]} must equal the model side {model_cfg.side}")
    _check_provenance(index)
    warn_if_untuned(cfg.objective)
    needs_val = cfg.val_every > 0 or cfg.use_early_stopping or cfg.use_best
    if needs_val and not index.validation:
        raise TrainingError("validation split is empty but validation/early stopping is enabled")

    torch.manual_seed(cfg.seed)
    net = build(model_cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    state = TrainState()
    if resume_from is not None:
        stored_cfg, payload = read_checkpoint(resume_from)
        if stored_cfg != model_cfg:
            raise ConfigError("checkpoint model config differs from the requested one")
        net.load_state_dict(payload["model"])
        opt.load_state_dict(payload["extra"]["optimizer"])
        state = TrainState.from_dict(payload["extra"]["state"])

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    best_weights = None
    if ckpt_dir is not None and state.best_step >= 0 and (ckpt_dir / "best.ckpt").exists():
        best_weights = read_checkpoint(ckpt_dir / "best.ckpt")[1]["model"]

    boundaries = set(np.cumsum([n for _, n in cfg.schedule]).tolist())
    cache: dict[int, tuple[list, list]] = {}
    net.train()
    end = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    while state.step < end and not state.stopped_early:
        step = state.step
        side = cfg.side_at(step)
        if side not in cache:
            cache.clear()
            val = _load_split(index.validation, side) if needs_val else []
            cache[side] = (_load_split(index.train, side), val)
        train_imgs, val_imgs = cache[side]
        state.side = side

        x_hat, x, m, _ = make_batch(train_imgs, cfg, step)
        state.provenance["train"] = state.provenance.get("train", 0) + len(x)
        opt.zero_grad(set_to_none=True)
        loss = compute_loss(cfg.objective, net(x_hat), x, x_hat, m)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss.item()} at step {step} (batch seed [{cfg.seed}, {step}], side {side})")
        loss.backward()
        opt.step()
        state.step = step + 1

        val_value = None
        at_boundary = state.step in boundaries
        if needs_val and ((cfg.val_every and state.step % cfg.val_every == 0) or at_boundary):
            val_value = validation_criterion(net, val_imgs, cfg)
            # criteria measured at different input sides are not comparable:
            # only evaluations within the final stage compete for "best"
            if val_value < state.best_value or side != cfg.schedule[-1][0] or state.best_side != side:
                state.best_value = val_value
                state.best_step = state.step
                state.best_side = side
                state.evals_since_best = 0
                best_weights = {k: v.detach().clone() for k, v in net.state_dict().items()}
                if ckpt_dir is not None:
                    save_training_checkpoint(ckpt_dir / "best.ckpt", net, opt, state, cfg)
            else:
                state.evals_since_best += 1
                if cfg.use_early_stopping and state.evals_since_best >= cfg.patience:
                    log.info("early stop at step %d (best %.5g at %d)", state.step, state.best_value, state.best_step)
                    state.stopped_early = True
        state.history.append((step, side, loss.item(), val_value))
        if on_step is not None:
            on_step(state)

        if ckpt_dir is not None and (at_boundary or state.step == end):
            path = ckpt_dir / f"step{state.step:06d}_side{side}.ckpt"
            state.checkpoints.append(str(path))
            save_training_checkpoint(path, net, opt, state, cfg)

    if cfg.use_best and best_weights is not None:
        net.load_state_dict(best_weights)
    net.eval()
    return net, state
