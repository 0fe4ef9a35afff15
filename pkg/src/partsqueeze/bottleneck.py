"""Appearance-transfer bottleneck: channel normalization, squeeze, expand,
part centers, and coordinate-channel augmentation.

All operations are pure tensor functions defined per sample on maps shaped
``[C, H, W]``; a leading batch dimension is accepted everywhere and mapped
elementwise. ``u`` indexes width (0..W-1) and ``v`` indexes height (0..H-1).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInputError

# Stabilizer added to pooling denominators so that parts with (near-)zero
# mass keep finite values and gradients.
EPS_MASS = 1e-6


@dataclass(frozen=True)
class ModelDims:
    """Part count, feature dimension, and grid/image resolutions."""

    k: int
    l: int
    grid_h: int
    grid_w: int
    image_size: int

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInputError(f"k must be >= 1, got {self.k}")
        if self.l < 1:
            raise InvalidInputError(f"l must be >= 1, got {self.l}")
        if self.grid_h < 2 or self.grid_w < 2:
            raise InvalidInputError(
                f"grid must be at least 2x2, got {self.grid_h}x{self.grid_w}"
            )
        if self.image_size < 4 or self.image_size % 4 != 0:
            raise InvalidInputError(
                f"image_size must be a positive multiple of 4, got {self.image_size}"
            )

    @property
    def k_prime(self) -> int:
        """Number of segmentation channels: k foreground parts + background."""
        return self.k + 1


@dataclass
class PartCenters:
    """Foreground part centers in grid units with their masses.

    ``centers[..., k]`` is ``(c_u, c_v)`` for foreground part ``k`` (channel
    ``k+1`` of the segmentation map). ``z`` is the normalizer actually used
    (capped at 1 in "verbatim" mode), ``mass`` the raw channel sum. A center
    is flagged invalid when its mass falls below the stabilizer threshold.

    In verbatim mode a part with mass > 1 has its center scaled by the mass
    (the normalizer is capped), so centers may leave the grid; "sum" mode
    always yields the in-grid probability-weighted centroid.
    """

    centers: torch.Tensor  # [..., K, 2], (c_u, c_v)
    mass: torch.Tensor  # [..., K]
    z: torch.Tensor  # [..., K]
    valid: torch.Tensor  # [..., K] bool


def _check_seg_map(S: torch.Tensor, name: str = "S"):
    if S.dim() not in (3, 4):
        raise InvalidInputError(f"{name} must be [K',H,W] or [B,K',H,W], got {tuple(S.shape)}")


def normalize_channels(logits: torch.Tensor) -> torch.Tensor:
    """Channel softmax turning raw scores into a per-pixel part distribution."""
    _check_seg_map(logits, "logits")
    if not torch.isfinite(logits).all():
        raise InvalidInputError("logits contain non-finite values")
    return torch.softmax(logits, dim=-3)


def squeeze(S: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """Pool appearance vectors into one vector per part channel.

    Each channel of ``S`` acts as a spatial attention map over ``A``:
    ``F[k] = sum_p S[k,p] * A[:,p] / (sum_p S[k,p] + eps)``. Returns
    ``[K', L]`` (or ``[B, K', L]``).
    """
    _check_seg_map(S)
    _check_seg_map(A, "A")
    if S.dim() != A.dim() or S.shape[-2:] != A.shape[-2:] or S.shape[:-3] != A.shape[:-3]:
        raise InvalidInputError(
            f"segmentation {tuple(S.shape)} and appearance {tuple(A.shape)} grids disagree"
        )
    weighted = torch.einsum("...khw,...lhw->...kl", S, A)
    mass = S.sum(dim=(-2, -1))
    return weighted / (mass + EPS_MASS).unsqueeze(-1)


def expand(F: torch.Tensor, S: torch.Tensor) -> torch.Tensor:
    """Broadcast per-part vectors back onto a part layout.

    Pixel ``p`` of the result is ``sum_k F[k] * S[k,p]``, i.e. a convex
    combination of the part vectors under the target segmentation map.
    """
    _check_seg_map(S)
    if F.dim() != S.dim() - 1 or F.shape[-2] != S.shape[-3] or F.shape[:-2] != S.shape[:-3]:
        raise InvalidInputError(
            f"part features {tuple(F.shape)} do not match segmentation {tuple(S.shape)}"
        )
    return torch.einsum("...kl,...khw->...lhw", F, S)


def coordinate_grids(
    h: int, w: int, dtype: torch.dtype = torch.float32, device=None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(U, V)`` index grids of shape [h, w]: U[v,u] = u, V[v,u] = v."""
    v = torch.arange(h, dtype=dtype, device=device)
    u = torch.arange(w, dtype=dtype, device=device)
    V, U = torch.meshgrid(v, u, indexing="ij")
    return U, V


def part_centers(S: torch.Tensor, mode: str = "verbatim") -> PartCenters:
    """Per-part center coordinates of the foreground channels 1..K.

    ``mode="verbatim"`` normalizes by ``min(mass, 1)`` (the default used by
    the concentration loss); ``mode="sum"`` normalizes by the plain channel
    mass, giving the ordinary weighted centroid used for landmark readout.
    """
    _check_seg_map(S)
    if mode not in ("verbatim", "sum"):
        raise InvalidInputError(f"unknown center normalization mode {mode!r}")
    fg = S[..., 1:, :, :]
    h, w = fg.shape[-2:]
    U, V = coordinate_grids(h, w, dtype=S.dtype, device=S.device)
    mass = fg.sum(dim=(-2, -1))
    z = torch.clamp(mass, max=1.0) if mode == "verbatim" else mass
    denom = torch.clamp(z, min=EPS_MASS)
    c_u = torch.einsum("...khw,hw->...k", fg, U) / denom
    c_v = torch.einsum("...khw,hw->...k", fg, V) / denom
    centers = torch.stack([c_u, c_v], dim=-1)
    return PartCenters(centers=centers, mass=mass, z=z, valid=mass >= EPS_MASS)


def append_coordinate_channels(R: torch.Tensor) -> torch.Tensor:
    """Append two channels holding pixel coordinates rescaled to [-1, 1].

    Channel L is ``2*u/(W-1) - 1`` and channel L+1 is ``2*v/(H-1) - 1``, so
    the top-left pixel reads (-1, -1) and the bottom-right (+1, +1).
    """
    _check_seg_map(R, "R")
    h, w = R.shape[-2:]
    if h < 2 or w < 2:
        raise InvalidInputError(f"need at least a 2x2 grid for coordinates, got {h}x{w}")
    U, V = coordinate_grids(h, w, dtype=R.dtype, device=R.device)
    u_chan = 2.0 * U / (w - 1) - 1.0
    v_chan = 2.0 * V / (h - 1) - 1.0
    coords = torch.stack([u_chan, v_chan], dim=0)
    if R.dim() == 4:
        coords = coords.unsqueeze(0).expand(R.shape[0], -1, -1, -1)
    return torch.cat([R, coords], dim=-3)
