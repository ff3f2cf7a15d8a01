"""2D U-Net with padded convolutions and a configurable number of resolution levels.

The default six-level network halves a 256x256 canvas five times, leaving an
8x8 map in the central block. Five levels reproduce the classic depth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import canvas_offsets, crop_from_canvas, pad_to_canvas, slice_axial
from .volume_io import Study, Volume3D

CHECKPOINT_MAGIC = b"DMIRCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class UNetConfig:
    in_channels: int = 1
    n_classes: int = 1
    n_levels: int = 6
    base_width: int = 32
    width_cap: int = 256
    padding_mode: str = "padded"
    canvas: tuple[int, int] = (256, 256)
    # "relu_softmax" is ReLU then softmax, taken literally; "linear_softmax" is the usual one
    head: str = "relu_softmax"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.canvas = tuple(int(c) for c in self.canvas)
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.in_channels <= 3:
            raise ValueError(f"in_channels must be 1..3, got {self.in_channels}")
        if self.n_classes not in (1, 3):
            raise ValueError(f"n_classes must be 1 or 3, got {self.n_classes}")
        if self.n_levels not in (5, 6):
            raise ValueError(f"n_levels must be 5 or 6, got {self.n_levels}")
        if self.base_width < 1 or self.width_cap < self.base_width:
            raise ValueError("need 1 <= base_width <= width_cap")
        if self.padding_mode not in ("padded", "unpadded"):
            raise ValueError(f"unknown padding_mode {self.padding_mode!r}")
        if self.head not in ("relu_softmax", "linear_softmax"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.padding_mode == "padded":
            step = 2 ** (self.n_levels - 1)
            if any(c % step for c in self.canvas):
                raise ValueError(f"canvas {self.canvas} not divisible by {step}")
        else:
            unpadded_output_size(self.canvas[0], self.n_levels)
            unpadded_output_size(self.canvas[1], self.n_levels)

    def widths(self) -> list[int]:
        return [min(self.base_width * 2 ** lvl, self.width_cap) for lvl in range(self.n_levels)]

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def unpadded_output_size(size: int, n_levels: int) -> int:
    """Output extent of the unpadded network along one axis; raises if invalid."""
    s = size
    for _ in range(n_levels - 1):
        s -= 4
        if s <= 0 or s % 2:
            raise ValueError(f"input size {size} invalid for unpadded {n_levels}-level net")
        s //= 2
    s -= 4
    for _ in range(n_levels - 1):
        s = 2 * s - 4
    if s <= 0:
        raise ValueError(f"input size {size} too small for unpadded {n_levels}-level net")
    return s


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, padding: int, eps: float, momentum: float):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=1, padding=padding),
            nn.BatchNorm2d(cout, eps=eps, momentum=momentum),
            nn.ReLU(),
            nn.Conv2d(cout, cout, 3, stride=1, padding=padding),
            nn.BatchNorm2d(cout, eps=eps, momentum=momentum),
            nn.ReLU(),
        )


def _center_crop(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    dh, dw = (x.shape[-2] - h) // 2, (x.shape[-1] - w) // 2
    return x[..., dh:dh + h, dw:dw + w]


class DeepMIR(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        pad = 1 if config.padding_mode == "padded" else 0
        bn = dict(eps=config.bn_eps, momentum=config.bn_momentum)
        widths = config.widths()
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for w in widths[:-1]:
            self.encoders.append(DoubleConv(cin, w, pad, **bn))
            cin = w
        self.center = DoubleConv(cin, widths[-1], pad, **bn)
        self.upsamples = nn.ModuleList()
        self.decoders = nn.ModuleList()
        cin = widths[-1]
        for w in reversed(widths[:-1]):
            self.upsamples.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.decoders.append(DoubleConv(2 * w, w, pad, **bn))
            cin = w
        self.head = nn.Conv2d(cin, config.n_classes, 1)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Encoder feature maps per level, central block last."""
        maps = []
        for enc in self.encoders:
            x = enc(x)
            maps.append(x)
            x = F.max_pool2d(x, 2)
        maps.append(self.center(x))
        return maps

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        """Head output before the final sigmoid/softmax."""
        *skips, x = self.features(x)
        for up, dec in zip(self.upsamples, self.decoders):
            x = up(x)
            skip = skips.pop()
            if skip.shape[-2:] != x.shape[-2:]:
                skip = _center_crop(skip, *x.shape[-2:])
            x = dec(torch.cat([x, skip], dim=1))
        x = self.head(x)
        if self.config.n_classes > 1 and self.config.head == "relu_softmax":
            x = F.relu(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected B x {self.config.in_channels} x H x W input, got {tuple(x.shape)}"
            )
        s = self.scores(x)
        if self.config.n_classes == 1:
            return torch.sigmoid(s)
        return torch.softmax(s, dim=1)

    def log_probs(self, x: torch.Tensor) -> torch.Tensor:
        """Per-class log probabilities (single-class: log p and log(1-p) stacked)."""
        s = self.scores(x)
        if self.config.n_classes == 1:
            return torch.cat([F.logsigmoid(-s), F.logsigmoid(s)], dim=1)
        return torch.log_softmax(s, dim=1)


def _init_weights(model: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed) % 2**63)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                else:
                    # stride equals kernel size: each output sees one tap per input channel
                    fan_in = m.in_channels
                bound = 1.0 / np.sqrt(fan_in)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                m.bias.copy_(torch.rand(m.bias.shape, generator=gen) * 2 * bound - bound)


def build(config: UNetConfig) -> DeepMIR:
    config.validate()
    model = DeepMIR(config)
    _init_weights(model, config.seed)
    return model


def output_size(config: UNetConfig) -> tuple[int, int]:
    if config.padding_mode == "padded":
        return config.canvas
    return tuple(unpadded_output_size(c, config.n_levels) for c in config.canvas)


@torch.no_grad()
def predict_slices(model: DeepMIR, channels: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Probabilities (N, K, H, W) on the canvas frame for (N, C, H, W) inputs.

    Unpadded networks produce a smaller map; it is placed centred on the
    canvas and the border is filled with certain background.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    for i in range(0, len(channels), batch_size):
        x = torch.as_tensor(np.ascontiguousarray(channels[i:i + batch_size]), dtype=dtype)
        outs.append(model(x).to(torch.float64).numpy())
    probs = np.concatenate(outs)
    canvas = tuple(channels.shape[-2:])
    if probs.shape[-2:] != canvas:
        full = np.zeros(probs.shape[:2] + canvas)
        if probs.shape[1] > 1:
            full[:, 0] = 1.0
        ox, oy = canvas_offsets(probs.shape[-2:], canvas)
        full[..., ox:ox + probs.shape[-2], oy:oy + probs.shape[-1]] = probs
        probs = full
    return probs


def predict_volume(model: DeepMIR, study: Study, modalities: Sequence[str],
                   batch_size: int = 16) -> list[Volume3D]:
    """Per-class probability volumes for a preprocessed study."""
    if "SWI" not in modalities:
        raise ValueError("modalities must include SWI")
    slices = slice_axial(study, modalities)
    canvas = model.config.canvas
    x = np.stack([pad_to_canvas(s, canvas).channels for s in slices])
    probs = crop_from_canvas(predict_slices(model, x, batch_size), study.dims[:2])
    # (nz, K, nx, ny) -> K volumes of (nx, ny, nz)
    probs = np.moveaxis(probs, 0, -1)
    return [Volume3D(p.astype(np.float32), study.spacing_mm, "f32") for p in probs]


def save_checkpoint(model: DeepMIR, path, extra: dict | None = None) -> None:
    """Write config, metadata and named float32 tensors to one file.

    Layout: magic, u32 version, u64 header length, JSON header, raw tensors.
    """
    tensors = {k: v.detach().to(torch.float32).cpu().numpy()
               for k, v in model.state_dict().items() if v.is_floating_point()}
    entries, offset = [], 0
    for name, arr in tensors.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "extra": extra or {},
        "tensors": entries,
    }).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for arr in tensors.values():
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[DeepMIR, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    body = raw[20 + hlen:]
    model = build(UNetConfig.from_dict(header["config"]))
    state = model.state_dict()
    expected = {k for k, v in state.items() if v.is_floating_point()}
    stored = {e["name"] for e in header["tensors"]}
    if stored != expected:
        raise ValueError(f"checkpoint tensors do not match config: {sorted(stored ^ expected)}")
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        if shape != tuple(state[e["name"]].shape):
            raise ValueError(f"{e['name']}: stored shape {shape}, config implies "
                             f"{tuple(state[e['name']].shape)}")
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=e["offset"]).reshape(shape)
        state[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model, header["extra"]
