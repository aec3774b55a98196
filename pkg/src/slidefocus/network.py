"""Dual-encoder focus regression network and its weight container.

The model maps a 224x224x3 tile to one signed defocus distance. Two encoder
branches produce spatially aligned feature maps: a convolutional encoder
(four stride-2 stages) and a spectral encoder (four fast-Fourier-convolution
blocks whose global branch mixes channels in the frequency domain). Their
concatenation passes through a fusing bottleneck, global average pooling,
and a linear head.

Variants swap branches while keeping the two-branch topology:
``spatial`` uses two convolutional encoders, ``spectral`` two FFC encoders,
``spatiospectral`` one of each.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, WeightLoadError

VARIANTS = ("spatial", "spectral", "spatiospectral")
_MAGIC = b"SFWT"
_FORMAT_VERSION = 1

# Fraction of channels routed through the global (Fourier) branch of an FFC
# block; 0.5 is the common default.
FFC_GLOBAL_FRACTION = 0.5


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "spatiospectral"
    base_channels: int = 48
    input_size: tuple[int, int, int] = (224, 224, 3)
    param_budget: int = 4_200_000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ShapeError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.base_channels < 2:
            raise ShapeError("base_channels must be >= 2")
        h, w, c = self.input_size
        if h % 16 or w % 16:
            raise ShapeError(f"input size {h}x{w} must be divisible by 16")
        if c != 3:
            raise ShapeError("expected 3-channel input")

    @property
    def stage_channels(self) -> tuple[int, int, int, int]:
        c = self.base_channels
        return (c, 2 * c, 4 * c, 8 * c)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d


@dataclass
class NormalizationStats:
    """Channel statistics, label scale, and output calibration.

    ``pred_scale``/``pred_offset_um`` hold an affine output calibration
    fitted on validation data after training (raw ~ scale * true + offset),
    so deployed predictions are ``(raw - offset) / scale``. Identity by
    default.
    """

    label_scale_um: float = 1.0
    channel_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    channel_std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    pred_scale: float = 1.0
    pred_offset_um: float = 0.0

    def to_dict(self) -> dict:
        return {
            "label_scale_um": self.label_scale_um,
            "channel_mean": list(self.channel_mean),
            "channel_std": list(self.channel_std),
            "pred_scale": self.pred_scale,
            "pred_offset_um": self.pred_offset_um,
        }

    @staticmethod
    def from_dict(d: dict) -> "NormalizationStats":
        return NormalizationStats(
            label_scale_um=float(d["label_scale_um"]),
            channel_mean=tuple(float(v) for v in d["channel_mean"]),
            channel_std=tuple(float(v) for v in d["channel_std"]),
            pred_scale=float(d.get("pred_scale", 1.0)),
            pred_offset_um=float(d.get("pred_offset_um", 0.0)),
        )


def _check_spatial_dims(x: torch.Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D batch, got shape {tuple(x.shape)}")
    if x.shape[-2] % 16 or x.shape[-1] % 16:
        raise ShapeError(f"spatial size {x.shape[-2]}x{x.shape[-1]} must be divisible by 16")


class SpatialEncoder(nn.Module):
    """Four hierarchical stride-2 convolution stages; output is H/16 x W/16."""

    def __init__(self, in_channels: int, stage_channels: tuple[int, ...]):
        super().__init__()
        stages = []
        prev = in_channels
        for ch in stage_channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1),
                    nn.BatchNorm2d(ch),
                    nn.GELU(),
                )
            )
            prev = ch
        self.stages = nn.Sequential(*stages)
        self.out_channels = stage_channels[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_spatial_dims(x)
        return self.stages(x)


class FourierUnit(nn.Module):
    """Channel mixing in the 2-D real Fourier domain.

    Real and imaginary parts are stacked as channels and mixed with a 1x1
    convolution; with identity mixing weights the unit reduces to an exact
    FFT round trip. Normalization and activation live outside the unit.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.mix = nn.Conv2d(2 * in_channels, 2 * out_channels, kernel_size=1)

    @staticmethod
    def frequency_power(x: torch.Tensor) -> torch.Tensor:
        """Per-frequency power entering the mixing step (shift invariant)."""
        z = torch.fft.rfft2(x, norm="ortho")
        return z.real.square() + z.imag.square()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        z = torch.fft.rfft2(x, norm="ortho")
        stacked = torch.cat([z.real, z.imag], dim=1)
        mixed = self.mix(stacked)
        re, im = mixed.chunk(2, dim=1)
        return torch.fft.irfft2(torch.complex(re, im), s=(h, w), norm="ortho")


class FFCBlock(nn.Module):
    """Fast Fourier convolution block with stride-2 downsampling.

    Channels are split into a local branch (3x3 convolutions) and a global
    branch (Fourier-domain mixing); the four cross paths exchange
    information before per-branch normalization and activation.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.global_in = max(1, int(FFC_GLOBAL_FRACTION * in_channels))
        self.local_in = in_channels - self.global_in
        self.global_out = max(1, int(FFC_GLOBAL_FRACTION * out_channels))
        self.local_out = out_channels - self.global_out
        conv = lambda ci, co: nn.Conv2d(ci, co, kernel_size=3, stride=2, padding=1)
        self.l2l = conv(self.local_in, self.local_out)
        self.l2g = conv(self.local_in, self.global_out)
        self.g2l = conv(self.global_in, self.local_out)
        self.g2g = FourierUnit(self.global_in, self.global_out)
        self.norm_local = nn.BatchNorm2d(self.local_out)
        self.norm_global = nn.BatchNorm2d(self.global_out)
        self.act = nn.GELU()

    def split_input(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return x[:, : self.local_in], x[:, self.local_in:]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xl, xg = self.split_input(x)
        yl = self.act(self.norm_local(self.l2l(xl) + self.g2l(xg)))
        xg_down = F.avg_pool2d(xg, kernel_size=2, stride=2)
        yg = self.act(self.norm_global(self.l2g(xl) + self.g2g(xg_down)))
        return torch.cat([yl, yg], dim=1)


class SpectralEncoder(nn.Module):
    """Four sequential FFC blocks, downsampling matched to the spatial path."""

    def __init__(self, in_channels: int, stage_channels: tuple[int, ...]):
        super().__init__()
        blocks = []
        prev = in_channels
        for ch in stage_channels:
            blocks.append(FFCBlock(prev, ch))
            prev = ch
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = stage_channels[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_spatial_dims(x)
        return self.blocks(x)


def _build_encoder(kind: str, config: ModelConfig) -> nn.Module:
    if kind == "spatial":
        return SpatialEncoder(3, config.stage_channels)
    return SpectralEncoder(3, config.stage_channels)


def build_spatial_encoder(config: ModelConfig) -> SpatialEncoder:
    return SpatialEncoder(3, config.stage_channels)


def build_spectral_encoder(config: ModelConfig) -> SpectralEncoder:
    return SpectralEncoder(3, config.stage_channels)


class FocusNet(nn.Module):
    """Two encoder branches, a fusing bottleneck, and a scalar head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        kinds = {
            "spatial": ("spatial", "spatial"),
            "spectral": ("spectral", "spectral"),
            "spatiospectral": ("spatial", "spectral"),
        }[config.variant]
        self.encoder_a = _build_encoder(kinds[0], config)
        self.encoder_b = _build_encoder(kinds[1], config)
        fused = self.encoder_a.out_channels + self.encoder_b.out_channels
        self.bottleneck = nn.Sequential(
            nn.Conv2d(fused, fused // 2, kernel_size=3, padding=1),
            nn.BatchNorm2d(fused // 2),
            nn.GELU(),
        )
        self.head = nn.Linear(fused // 2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([self.encoder_a(x), self.encoder_b(x)], dim=1)
        feats = self.bottleneck(feats)
        pooled = F.adaptive_avg_pool2d(feats, 1).flatten(1)
        return self.head(pooled).squeeze(-1)


@dataclass
class FocusModel:
    """A FocusNet plus the normalization needed to speak micrometers."""

    config: ModelConfig
    net: FocusNet
    stats: NormalizationStats = field(default_factory=NormalizationStats)
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "FocusModel":
        torch.manual_seed(seed)
        return cls(config=config, net=FocusNet(config))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def normalize_images(self, images: np.ndarray) -> torch.Tensor:
        """[N, H, W, 3] float array in [0, 1] -> channel-normalized NCHW tensor."""
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        h, w, c = self.config.input_size
        if arr.shape[1:] != (h, w, c):
            raise ShapeError(f"expected tiles of shape {(h, w, c)}, got {arr.shape[1:]}")
        mean = np.asarray(self.stats.channel_mean, dtype=np.float32)
        std = np.asarray(self.stats.channel_std, dtype=np.float32)
        arr = (arr - mean) / std
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        """Channel-normalized NCHW batch -> signed defocus predictions in um."""
        raw = self.net(batch) * self.stats.label_scale_um
        return (raw - self.stats.pred_offset_um) / self.stats.pred_scale

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        """Raw [0, 1] tiles -> per-tile defocus predictions in micrometers."""
        self.net.eval()
        with torch.no_grad():
            out = self.forward(self.normalize_images(images))
        return out.numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Weight container: JSON header + named float32 tensors in one binary file
# ---------------------------------------------------------------------------

def export_weights(model: FocusModel, path: Path | str) -> None:
    state = model.net.state_dict()
    tensors = []
    payload = bytearray()
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.int64)):
            arr = arr.astype(np.float32)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
        payload.extend(arr.tobytes(order="C"))
    header = {
        "format_version": _FORMAT_VERSION,
        "variant": model.config.variant,
        "base_channels": model.config.base_channels,
        "input_size": list(model.config.input_size),
        "param_budget": model.config.param_budget,
        "normalization_stats": model.stats.to_dict(),
        "meta": model.meta,
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_weights(path: Path | str, expect_variant: str | None = None) -> FocusModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise WeightLoadError(f"cannot read weight file {path}: {exc}") from exc
    if len(blob) < 8 or blob[:4] != _MAGIC:
        raise WeightLoadError(f"{path} is not a weight container (bad magic)")
    header_len = struct.unpack("<I", blob[4:8])[0]
    if len(blob) < 8 + header_len:
        raise WeightLoadError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightLoadError(f"{path} has a corrupt header: {exc}") from exc
    if header.get("format_version") != _FORMAT_VERSION:
        raise WeightLoadError(
            f"{path} has format version {header.get('format_version')}, "
            f"expected {_FORMAT_VERSION}"
        )
    variant = header["variant"]
    if expect_variant is not None and variant != expect_variant:
        raise WeightLoadError(f"{path} holds a {variant!r} model, expected {expect_variant!r}")

    config = ModelConfig(
        variant=variant,
        base_channels=int(header["base_channels"]),
        input_size=tuple(header["input_size"]),
        param_budget=int(header.get("param_budget", 0)),
    )
    model = FocusModel.create(config, seed=0)
    model.stats = NormalizationStats.from_dict(header["normalization_stats"])
    model.meta = header.get("meta", {})

    offset = 8 + header_len
    state = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise WeightLoadError(f"{path} is truncated in tensor {spec['name']!r}")
        state[spec["name"]] = torch.from_numpy(
            np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        )
        offset += nbytes
    if offset != len(blob):
        raise WeightLoadError(f"{path} has {len(blob) - offset} trailing bytes")
    try:
        model.net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise WeightLoadError(f"{path} does not match the declared architecture: {exc}") from exc
    return model
