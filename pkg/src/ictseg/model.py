"""Segmentation networks, functional forward/gradient over named parameters, EMA teacher, checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

ParamSet = dict[str, torch.Tensor]

ARCHITECTURES = ("tiny_unet", "resnet50_unet")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float, iteration: int | None = None):
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"non-finite {component} ({value}){where}")
        self.component = component
        self.iteration = iteration


@dataclass(frozen=True)
class ModelSpec:
    architecture: Literal["tiny_unet", "resnet50_unet"] = "tiny_unet"
    n_classes: int = 2
    init_seed: int | None = None
    in_channels: int = 1

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.n_classes < 2:
            raise ValueError(f"model.n_classes must be >= 2, got {self.n_classes}")
        if self.in_channels < 1:
            raise ValueError("model.in_channels must be >= 1")


class TinyUNet(nn.Module):
    """Two-stage U-Net: 16 and 32 channel encoder, 64 channel bottleneck.

    Downsampling is 2x2 average pooling, upsampling nearest-neighbour; the
    decoder mirrors the encoder with skip concatenation.
    """

    divisor = 4

    def __init__(self, in_channels: int = 1, n_classes: int = 2):
        super().__init__()
        self.enc1 = nn.Conv2d(in_channels, 16, 3, padding=1)
        self.enc2 = nn.Conv2d(16, 32, 3, padding=1)
        self.bottleneck = nn.Conv2d(32, 64, 3, padding=1)
        self.dec2 = nn.Conv2d(64 + 32, 32, 3, padding=1)
        self.dec1 = nn.Conv2d(32 + 16, 16, 3, padding=1)
        self.head = nn.Conv2d(16, n_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s1 = F.relu(self.enc1(x))
        s2 = F.relu(self.enc2(F.avg_pool2d(s1, 2)))
        b = F.relu(self.bottleneck(F.avg_pool2d(s2, 2)))
        d2 = F.relu(self.dec2(torch.cat([F.interpolate(b, scale_factor=2.0), s2], 1)))
        d1 = F.relu(self.dec1(torch.cat([F.interpolate(d2, scale_factor=2.0), s1], 1)))
        return torch.softmax(self.head(d1), dim=1)


class _UpBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)

    def forward(self, x: torch.Tensor, skip: torch.Tensor | None) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2.0)
        if skip is not None:
            x = torch.cat([x, skip], 1)
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


def _groups(channels: int) -> int:
    return math.gcd(32, channels)


class ResNet50UNet(nn.Module):
    """ResNet-50 encoder with a U-Net decoder over its five resolution levels.

    GroupNorm replaces BatchNorm so that training and inference behave alike and
    the parameters alone describe the model.
    """

    divisor = 32

    def __init__(self, in_channels: int = 1, n_classes: int = 2):
        super().__init__()
        from torchvision.models import resnet50

        enc = resnet50(weights=None, norm_layer=lambda c: nn.GroupNorm(_groups(c), c))
        enc.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.stem = nn.Sequential(enc.conv1, enc.bn1, enc.relu)
        self.pool = enc.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = enc.layer1, enc.layer2, enc.layer3, enc.layer4
        self.up4 = _UpBlock(2048, 1024, 256)
        self.up3 = _UpBlock(256, 512, 128)
        self.up2 = _UpBlock(128, 256, 64)
        self.up1 = _UpBlock(64, 64, 32)
        self.up0 = _UpBlock(32, 0, 16)
        self.head = nn.Conv2d(16, n_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s0 = self.stem(x)  # /2, 64
        s1 = self.layer1(self.pool(s0))  # /4, 256
        s2 = self.layer2(s1)  # /8, 512
        s3 = self.layer3(s2)  # /16, 1024
        s4 = self.layer4(s3)  # /32, 2048
        d = self.up4(s4, s3)
        d = self.up3(d, s2)
        d = self.up2(d, s1)
        d = self.up1(d, s0)
        d = self.up0(d, None)
        return torch.softmax(self.head(d), dim=1)


def build_model(spec: ModelSpec) -> nn.Module:
    """Architecture shell; its own weights are never used, see :func:`forward`."""
    with torch.random.fork_rng(devices=[]):
        if spec.architecture == "tiny_unet":
            return TinyUNet(spec.in_channels, spec.n_classes)
        return ResNet50UNet(spec.in_channels, spec.n_classes)


def init_params(spec: ModelSpec, dtype: torch.dtype = torch.float32, net: nn.Module | None = None) -> ParamSet:
    """Seeded He-normal weights, zero biases, unit norm scales."""
    if spec.init_seed is None:
        raise ValueError("model.init_seed is unresolved")
    net = build_model(spec) if net is None else net
    gen = torch.Generator().manual_seed(int(spec.init_seed))
    params: ParamSet = {}
    for name, p in net.named_parameters():
        if p.ndim > 1:
            fan_in = p[0].numel()
            w = torch.randn(p.shape, generator=gen, dtype=torch.float64) * math.sqrt(2.0 / fan_in)
            params[name] = w.to(dtype)
        elif name.endswith(".bias"):
            params[name] = torch.zeros(p.shape, dtype=dtype)
        else:
            params[name] = torch.ones(p.shape, dtype=dtype)
    return params


def param_count(params: ParamSet) -> int:
    return sum(p.numel() for p in params.values())


def forward(net: nn.Module, params: ParamSet, images: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities for an N x C x H x W batch."""
    if images.ndim != 4:
        raise ValueError(f"expected an N x C x H x W batch, got shape {tuple(images.shape)}")
    divisor = getattr(net, "divisor", 1)
    if images.shape[2] % divisor or images.shape[3] % divisor:
        raise ValueError(
            f"{type(net).__name__} needs H and W divisible by {divisor}, got {tuple(images.shape[2:])}"
        )
    return functional_call(net, params, (images,))


def loss_gradient(
    params: ParamSet,
    loss_fn: Callable[[ParamSet], torch.Tensor],
    iteration: int | None = None,
) -> tuple[float, ParamSet]:
    """Scalar loss and its gradient with respect to every entry of ``params``."""
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves)
    value = float(loss.detach()) if isinstance(loss, torch.Tensor) else float(loss)
    if not math.isfinite(value):
        raise NonFiniteLossError("loss", value, iteration)
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
        return value, {k: torch.zeros_like(v) for k, v in params.items()}
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    return value, {
        k: torch.zeros_like(leaves[k]) if g is None else g for k, g in zip(leaves, grads)
    }


@dataclass
class StudentTeacher:
    student: ParamSet
    teacher: ParamSet
    lambda_ema: float = 0.99

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_ema <= 1.0:
            raise ValueError(f"lambda_ema must lie in [0, 1], got {self.lambda_ema}")
        if list(self.student) != list(self.teacher) or any(
            self.student[k].shape != self.teacher[k].shape for k in self.student
        ):
            raise ValueError("student and teacher parameter sets are not congruent")

    @classmethod
    def from_student(cls, student: ParamSet, lambda_ema: float = 0.99) -> "StudentTeacher":
        return cls(student, {k: v.detach().clone() for k, v in student.items()}, lambda_ema)


@torch.no_grad()
def ema_update(pair: StudentTeacher) -> StudentTeacher:
    """teacher <- (1 - lambda) * student + lambda * teacher, entrywise."""
    lam = pair.lambda_ema
    teacher = {k: (1.0 - lam) * pair.student[k] + lam * pair.teacher[k] for k in pair.teacher}
    return StudentTeacher(pair.student, teacher, lam)


# --------------------------------------------------------------------------- #
# checkpoint file: magic, u64 header length, JSON header, raw little-endian payload
# --------------------------------------------------------------------------- #

CHECKPOINT_MAGIC = b"ICTCKPT1"


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        dtype = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries, "meta": meta}).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = memoryview(blob)[16 + n :]
    tensors = {}
    for e in header["entries"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated at entry {e['name']}")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=dtype).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))
    return tensors, header["meta"]
