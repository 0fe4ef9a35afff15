"""Training losses: perceptual reconstruction, angular-margin part
classification, and the foreground/background concentration penalties,
combined into a weighted total.

The perceptual distance is computed against a frozen feature extractor that
exposes named taps. Per-tap weights are refreshed every ``refresh_every``
steps to the reciprocal of each tap's recent average distance, so no tap
dominates just because of its scale.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Mapping

import torch
from torch import nn

from .bottleneck import EPS_MASS, coordinate_grids, part_centers
from .errors import InvalidInputError, TrainingDivergenceError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# VGG-19 convolutional stack; "M" marks 2x2 max pooling.
_VGG19_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
              512, 512, 512, 512, "M", 512, 512, 512, 512, "M")
# Indices of the tapped conv outputs within the sequential stack built above
# (conv + ReLU per conv entry, one module per pool).
_VGG19_TAPS = {"conv1_2": 2, "conv2_2": 7, "conv3_2": 12, "conv4_2": 21, "conv5_2": 30}


class VggExtractor(nn.Module):
    """Frozen VGG-19 feature taps: input, conv1_2 ... conv5_2.

    Expects images in [0, 1]; ImageNet normalization is applied internally
    before the conv stack (the raw image itself is the "input" tap). Weights
    come from a standard pretrained checkpoint file; the network is never
    trained here.
    """

    tap_names = ("input", "conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2")

    def __init__(self, weights_path: str | None = None):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 3
        for item in _VGG19_CFG:
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers.append(nn.Conv2d(in_ch, int(item), kernel_size=3, padding=1))
                layers.append(nn.ReLU(inplace=False))
                in_ch = int(item)
        self.features = nn.Sequential(*layers[: max(_VGG19_TAPS.values()) + 1])
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        if weights_path is not None:
            self.load_weights(weights_path)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def load_weights(self, path: str):
        state = torch.load(path, map_location="cpu", weights_only=True)
        if any(k.startswith("features.") for k in state):
            state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
        own = self.features.state_dict()
        state = {k: v for k, v in state.items() if k in own}
        missing = set(own) - set(state)
        if missing:
            raise InvalidInputError(f"weights file {path} is missing keys: {sorted(missing)[:4]}...")
        self.features.load_state_dict(state)

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        taps = {"input": x}
        h = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        for idx, layer in enumerate(self.features):
            h = layer(h)
            for name, tap_idx in _VGG19_TAPS.items():
                if idx == tap_idx:
                    taps[name] = h
        return taps


class TinyExtractor(nn.Module):
    """Small fixed random conv pyramid with the same tap contract.

    Used for desk-scale training and tests where a full pretrained extractor
    is unavailable or too slow. Weights are drawn once from ``seed`` and
    frozen, so the extractor is a deterministic function of its input.
    """

    tap_names = ("input", "feat1", "feat2", "feat3")

    def __init__(self, seed: int = 0, widths: tuple[int, int, int] = (12, 24, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [3, *widths]
        self.blocks = nn.ModuleList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(cin, cout, kernel_size=3, padding=1)
            with torch.no_grad():
                # Unit-ish response scale: Kaiming-style std without relying
                # on global RNG state.
                std = math.sqrt(2.0 / (cin * 9))
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            self.blocks.append(conv)
        self.pool = nn.AvgPool2d(2, 2)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        taps = {"input": x}
        h = x
        for i, conv in enumerate(self.blocks, start=1):
            h = torch.relu(conv(h))
            taps[f"feat{i}"] = h
            h = self.pool(h)
        return taps


def build_extractor(kind: str, weights_path: str | None = None, seed: int = 0) -> nn.Module:
    if kind == "vgg19":
        return VggExtractor(weights_path)
    if kind == "tiny":
        return TinyExtractor(seed=seed)
    raise InvalidInputError(f"unknown perceptual extractor kind {kind!r}")


def perceptual_terms(
    x: torch.Tensor, x_hat: torch.Tensor, extractor: nn.Module
) -> dict[str, torch.Tensor]:
    """Per-tap mean squared feature distance between two images."""
    if x.shape != x_hat.shape:
        raise InvalidInputError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    ref = extractor(x)
    out = extractor(x_hat)
    return {name: (ref[name] - out[name]).pow(2).mean() for name in extractor.tap_names}


def perceptual_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    extractor: nn.Module,
    weights: Mapping[str, float] | None = None,
) -> torch.Tensor:
    """Weighted sum of per-tap distances (one reconstruction direction)."""
    terms = perceptual_terms(x, x_hat, extractor)
    if weights is None:
        weights = {name: 1.0 for name in terms}
    return sum(weights[name] * terms[name] for name in terms)


class LayerWeights:
    """Reciprocal-of-recent-average tap weights for the perceptual loss.

    Starts at 1.0 per tap. Every ``refresh_every`` steps the weight becomes
    ``1 / max(mean of the last `window` observed tap losses, floor)``.
    Owned and mutated by the single training driver only.
    """

    def __init__(self, tap_names, refresh_every: int = 100, window: int = 100, floor: float = 1e-8):
        self.tap_names = tuple(tap_names)
        self.refresh_every = refresh_every
        self.floor = floor
        self.weights = {name: 1.0 for name in self.tap_names}
        self._history = {name: deque(maxlen=window) for name in self.tap_names}

    def observe(self, terms: Mapping[str, torch.Tensor]):
        for name in self.tap_names:
            self._history[name].append(float(terms[name].detach()))

    def maybe_refresh(self, step: int) -> bool:
        """Refresh on multiples of ``refresh_every``; returns True if refreshed."""
        if step <= 0 or step % self.refresh_every != 0:
            return False
        for name in self.tap_names:
            hist = self._history[name]
            if not hist:
                continue
            self.weights[name] = 1.0 / max(sum(hist) / len(hist), self.floor)
        return True

    def state_dict(self) -> dict:
        return {
            "tap_names": list(self.tap_names),
            "weights": dict(self.weights),
            "history": {k: list(v) for k, v in self._history.items()},
            "refresh_every": self.refresh_every,
            "floor": self.floor,
        }

    def load_state_dict(self, state: dict):
        if tuple(state["tap_names"]) != self.tap_names:
            raise InvalidInputError("layer-weight taps do not match the current extractor")
        self.weights = dict(state["weights"])
        for k, vals in state["history"].items():
            self._history[k] = deque(vals, maxlen=self._history[k].maxlen)
        self.refresh_every = state["refresh_every"]
        self.floor = state["floor"]


@dataclass(frozen=True)
class ArcFaceConfig:
    """Radius scale and additive angular margin of the part classifier."""

    s: float = 20.0
    m: float = 0.5

    def __post_init__(self):
        if self.s <= 0:
            raise InvalidInputError(f"scale s must be > 0, got {self.s}")
        if not 0.0 <= self.m < math.pi:
            raise InvalidInputError(f"margin m must be in [0, pi), got {self.m}")


def arcface_loss(
    F: torch.Tensor, basis: torch.Tensor, cfg: ArcFaceConfig = ArcFaceConfig()
) -> torch.Tensor:
    """Self-classification of the foreground part vectors.

    Row k+1 of ``F`` (the k-th foreground part) should match basis row k.
    The target-class angle is penalized by the additive margin before the
    softmax; the background row of ``F`` is excluded. Returns the mean
    negative log-likelihood over parts (and over the batch if present).
    """
    if F.dim() not in (2, 3):
        raise InvalidInputError(f"F must be [K',L] or [B,K',L], got {tuple(F.shape)}")
    k = basis.shape[0]
    if basis.dim() != 2 or F.shape[-2] != k + 1 or F.shape[-1] != basis.shape[1]:
        raise InvalidInputError(
            f"basis {tuple(basis.shape)} does not match features {tuple(F.shape)}"
        )
    fg = F[..., 1:, :]
    feat = fg / (fg.norm(dim=-1, keepdim=True) + 1e-8)
    base = basis / (basis.norm(dim=-1, keepdim=True) + 1e-8)
    # cos[..., i, j] = cos(theta_{j,i}): angle between part feature i and basis j
    cos = torch.einsum("...il,jl->...ij", feat, base)
    cos = cos.clamp(-1.0 + 1e-7, 1.0 - 1e-7)
    theta = torch.acos(cos)
    target = torch.eye(k, dtype=torch.bool, device=F.device)
    logits = cfg.s * torch.where(target, torch.cos(theta + cfg.m), cos)
    log_prob = logits.diagonal(dim1=-2, dim2=-1) - torch.logsumexp(logits, dim=-1)
    return -log_prob.mean()


def foreground_concentration(S: torch.Tensor, mode: str = "verbatim") -> torch.Tensor:
    """Spatial second moment of each foreground channel about its center.

    Averaged over the K foreground parts; each part's contribution is
    ``sum_p ||p - c_k||^2 S[k,p] / z_k`` with the normalizer from
    ``part_centers`` (capped at 1 in verbatim mode).
    """
    pc = part_centers(S, mode=mode)
    fg = S[..., 1:, :, :]
    h, w = fg.shape[-2:]
    U, V = coordinate_grids(h, w, dtype=S.dtype, device=S.device)
    du = U.reshape(1, h, w) - pc.centers[..., 0].unsqueeze(-1).unsqueeze(-1)
    dv = V.reshape(1, h, w) - pc.centers[..., 1].unsqueeze(-1).unsqueeze(-1)
    sq = du.pow(2) + dv.pow(2)
    denom = torch.clamp(pc.z, min=EPS_MASS)
    per_part = (sq * fg).sum(dim=(-2, -1)) / denom
    return per_part.mean(dim=-1).mean()


def boundary_distance(
    h: int, w: int, dtype: torch.dtype = torch.float32, device=None
) -> torch.Tensor:
    """Distance map h(u,v) = min(u, W-u, v, H-v) on an [h, w] grid.

    Note the right and bottom edges read 1, not 0: the formula uses W-u
    rather than W-1-u, which is kept as written.
    """
    if h < 1 or w < 1:
        raise InvalidInputError(f"grid must be at least 1x1, got {h}x{w}")
    U, V = coordinate_grids(h, w, dtype=dtype, device=device)
    return torch.minimum(torch.minimum(U, w - U), torch.minimum(V, h - V))


def background_concentration(S: torch.Tensor, mode: str = "verbatim") -> torch.Tensor:
    """Pull background probability mass toward the image boundary.

    ``sum_p h(p)^2 S[0,p] / z_0`` with z_0 normalized like the foreground
    parts (capped at 1 in verbatim mode).
    """
    if mode not in ("verbatim", "sum"):
        raise InvalidInputError(f"unknown center normalization mode {mode!r}")
    bg = S[..., 0, :, :]
    h, w = bg.shape[-2:]
    hmap = boundary_distance(h, w, dtype=S.dtype, device=S.device)
    mass = bg.sum(dim=(-2, -1))
    z = torch.clamp(mass, max=1.0) if mode == "verbatim" else mass
    loss = (hmap.pow(2) * bg).sum(dim=(-2, -1)) / torch.clamp(z, min=EPS_MASS)
    return loss.mean()


@dataclass(frozen=True)
class LossWeights:
    """Combination weights of the four training losses."""

    rec: float = 1.5
    cls: float = 1.5
    fg: float = 0.5
    bg: float = 1.0

    def __post_init__(self):
        for name in ("rec", "cls", "fg", "bg"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"lambda_{name} must be >= 0")


@dataclass(frozen=True)
class LossReport:
    """Scalar loss components and their weighted total for one batch."""

    rec: float
    cls: float
    fg: float
    bg: float
    total: float


def total_loss(
    rec: torch.Tensor,
    cls: torch.Tensor,
    fg: torch.Tensor,
    bg: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Weighted combination of the four components.

    Raises ``TrainingDivergenceError`` naming the first non-finite component.
    """
    for name, value in (("rec", rec), ("cls", cls), ("fg", fg), ("bg", bg)):
        if not torch.isfinite(value).all():
            raise TrainingDivergenceError(name, float(value.detach()))
    return weights.rec * rec + weights.cls * cls + weights.fg * fg + weights.bg * bg
