"""Encoder/decoder network with stacked dilated convolutions.

At the default configuration the layer stack and activation sizes are::

    conv 32, conv 32, pool          512 -> 256
    conv 64, conv 64, pool          256 -> 128
    conv 128, conv 128, pool        128 -> 64
    4 x SDC (5 x 64 filters, 5x5)   64x64x320
    conv 256                        64x64x256
    tconv 256, conv 256, conv 128   128
    tconv 128, conv 128, conv 64    256
    tconv 64, conv 64, conv 32      512
    conv1x1 3 + sigmoid             512x512x3

``width`` scales every channel count (default 32); the acceptance suite uses a
narrower variant to fit a CPU budget.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT_VERSION = 1
_MAGIC = b"SSAE"


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    side: int = 512
    width: int = 32
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16)
    sdc_stacks: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.side <= 0 or self.side % 8:
            raise ConfigError(f"input side must be a positive multiple of 8, got {self.side}")
        if not self.dilations:
            raise ConfigError("dilation list must not be empty")
        if self.width < 1 or self.sdc_stacks < 1:
            raise ConfigError("width and sdc_stacks must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "dilations": tuple(d["dilations"])})


def conv_bn_relu(cin: int, cout: int, kernel: int = 3, dilation: int = 1) -> nn.Sequential:
    pad = dilation * (kernel // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, padding=pad, dilation=dilation),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def upconv_bn_relu(cin: int, cout: int) -> nn.Sequential:
    # output_padding=1 makes the 3x3 / stride 2 transpose exactly double the size
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class StackedDilatedConv(nn.Module):
    """Parallel 5x5 dilated convolutions, concatenated along channels."""

    def __init__(self, cin: int, branch_width: int, dilations: tuple[int, ...]):
        super().__init__()
        self.branches = nn.ModuleList(conv_bn_relu(cin, branch_width, 5, d) for d in dilations)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([b(x) for b in self.branches], dim=1)


class Autoencoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.width
        enc = []
        cin = 3
        for cout in (w, 2 * w, 4 * w):
            enc += [conv_bn_relu(cin, cout), conv_bn_relu(cout, cout), nn.MaxPool2d(2, 2)]
            cin = cout
        self.encoder = nn.Sequential(*enc)

        sdc = []
        for _ in range(config.sdc_stacks):
            sdc.append(StackedDilatedConv(cin, 2 * w, config.dilations))
            cin = 2 * w * len(config.dilations)
        sdc.append(conv_bn_relu(cin, 8 * w))
        self.middle = nn.Sequential(*sdc)

        self.decoder = nn.Sequential(
            upconv_bn_relu(8 * w, 8 * w), conv_bn_relu(8 * w, 8 * w), conv_bn_relu(8 * w, 4 * w),
            upconv_bn_relu(4 * w, 4 * w), conv_bn_relu(4 * w, 4 * w), conv_bn_relu(4 * w, 2 * w),
            upconv_bn_relu(2 * w, 2 * w), conv_bn_relu(2 * w, 2 * w), conv_bn_relu(2 * w, w),
        )
        # no batch norm here: it produces gridding artefacts in the output
        self.head = nn.Sequential(nn.Conv2d(w, 3, 1), nn.Sigmoid())
        self.forward_calls = 0
        self._init_weights(config.seed)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else m.weight.shape[0] * m.weight[0, 0].numel()
                std = (2.0 / fan_in) ** 0.5
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                    m.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # any multiple of 8 is accepted so progressive resizing can train below config.side
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"expected an Nx3xHxW batch with H, W divisible by 8, got {tuple(x.shape)}")
        self.forward_calls += 1
        return self.head(self.decoder(self.middle(self.encoder(x))))

    def layer_sequence(self) -> list[nn.Module]:
        """Top-level layers in order, one per row of the architecture table."""
        return [*self.encoder, *self.middle, *self.decoder, self.head]


def build(config: ModelConfig | None = None) -> Autoencoder:
    return Autoencoder(config or ModelConfig())


def forward(net: Autoencoder, batch) -> torch.Tensor:
    """Reconstruct a batch at the configured side in one pass.

    Numpy input is NHWC (or a single HWC image) and comes back as NHWC numpy;
    tensors are NCHW and stay tensors.
    """
    side = net.config.side
    if isinstance(batch, np.ndarray):
        arr = batch[None] if batch.ndim == 3 else batch
        if arr.shape[1:3] != (side, side):
            raise ValueError(f"expected {side}x{side} images, got {arr.shape[1]}x{arr.shape[2]}")
        t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)
        with torch.no_grad():
            return net(t).permute(0, 2, 3, 1).numpy()
    if tuple(batch.shape[-2:]) != (side, side):
        raise ValueError(f"expected {side}x{side} images, got {tuple(batch.shape[-2:])}")
    return net(batch)


def _state_bytes(state: dict) -> bytes:
    buf = io.BytesIO()
    torch.save(state, buf)
    return buf.getvalue()


def save_weights(net: Autoencoder, path: str | Path, extra: dict | None = None) -> None:
    """Write a self-describing checkpoint: magic, JSON header, torch payload.

    The header carries the model config, a format version and a SHA-256 of
    the payload so truncated or altered files are rejected on load.
    """
    payload = _state_bytes({"model": net.state_dict(), "extra": extra or {}})
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "config": net.config.to_dict(),
            "sha256": hashlib.sha256(payload).hexdigest(),
        },
        sort_keys=True,
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        fh.write(payload)


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC or len(raw) < 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    n = int.from_bytes(raw[4:8], "little")
    try:
        header = json.loads(raw[8 : 8 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = raw[8 + n :]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=False)
    return ModelConfig.from_dict(header["config"]), state


def load_weights(path: str | Path, expected: ModelConfig | None = None) -> Autoencoder:
    config, state = read_checkpoint(path)
    if expected is not None and expected != config:
        raise CheckpointError(f"{path}: stored config {config} does not match expected {expected}")
    net = Autoencoder(config)
    net.load_state_dict(state["model"])
    net.eval()
    return net
