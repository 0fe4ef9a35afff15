"""Random thin-plate-spline warps for building training pairs.

A warp is parameterized by per-control-point displacements on a regular grid
plus a small random affine component, all in coordinates normalized to
[-1, 1]. Images are backward-warped: for every output pixel we solve where
it came from in the source and bilinearly sample there, replicating border
pixels for samples that fall outside the frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as TF

from .errors import InvalidInputError

# Diagonal regularizer keeping the interpolation system invertible when
# control points coincide or displacements are degenerate.
KERNEL_RIDGE = 1e-9


@dataclass(frozen=True)
class TPSConfig:
    """Sampling distribution of one random warp.

    Control points sit on a ``grid x grid`` lattice. Every point is displaced
    by N(0, cp_sigma^2) noise and, independently per point with probability
    ``extra_prob``, by additional N(0, extra_sigma^2) noise. The affine
    component draws a translation per axis; rotation and scale jitter default
    to zero.
    """

    grid: int = 10
    cp_sigma: float = 0.001
    extra_sigma: float = 0.005
    extra_prob: float = 0.5
    translate_sigma: float = 0.1
    rotate_sigma: float = 0.0
    scale_sigma: float = 0.0

    def __post_init__(self):
        if self.grid < 2:
            raise InvalidInputError(f"control grid must be at least 2x2, got {self.grid}")
        for name in ("cp_sigma", "extra_sigma", "translate_sigma", "rotate_sigma", "scale_sigma"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if not 0.0 <= self.extra_prob <= 1.0:
            raise InvalidInputError(f"extra_prob must be in [0,1], got {self.extra_prob}")


@dataclass
class TPSParams:
    """One sampled warp: lattice points, their displacements, and the affine part."""

    points: np.ndarray  # [T, 2] regular lattice in [-1, 1]^2, (x, y)
    displacements: np.ndarray  # [T, 2]
    translation: np.ndarray  # [2]
    rotation: float = 0.0  # radians
    scale: float = 1.0

    def is_identity(self) -> bool:
        return (
            not self.displacements.any()
            and not self.translation.any()
            and self.rotation == 0.0
            and self.scale == 1.0
        )


def control_lattice(grid: int) -> np.ndarray:
    """Regular ``grid x grid`` control-point lattice spanning [-1, 1]^2."""
    axis = np.linspace(-1.0, 1.0, grid)
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def sample_tps(rng: np.random.Generator, cfg: TPSConfig) -> TPSParams:
    """Draw one warp. Draw order is fixed so seeded streams are reproducible."""
    points = control_lattice(cfg.grid)
    n = points.shape[0]
    disp = rng.normal(0.0, cfg.cp_sigma, size=(n, 2)) if cfg.cp_sigma > 0 else np.zeros((n, 2))
    extra_mask = rng.random(n) < cfg.extra_prob
    if cfg.extra_sigma > 0:
        disp = disp + extra_mask[:, None] * rng.normal(0.0, cfg.extra_sigma, size=(n, 2))
    translation = (
        rng.normal(0.0, cfg.translate_sigma, size=2)
        if cfg.translate_sigma > 0
        else np.zeros(2)
    )
    rotation = float(rng.normal(0.0, cfg.rotate_sigma)) if cfg.rotate_sigma > 0 else 0.0
    scale = 1.0 + (float(rng.normal(0.0, cfg.scale_sigma)) if cfg.scale_sigma > 0 else 0.0)
    return TPSParams(
        points=points,
        displacements=disp,
        translation=translation,
        rotation=rotation,
        scale=scale,
    )


def _radial_kernel(r2: torch.Tensor) -> torch.Tensor:
    """U(r) = r^2 log r^2 with the removable singularity at r = 0 zeroed."""
    safe = torch.clamp(r2, min=1e-30)
    return torch.where(r2 > 0, r2 * torch.log(safe), torch.zeros_like(r2))


def _affine_targets(params: TPSParams) -> torch.Tensor:
    """Where each control point maps to in the source frame."""
    pts = torch.as_tensor(params.points, dtype=torch.float64)
    disp = torch.as_tensor(params.displacements, dtype=torch.float64)
    t = torch.as_tensor(params.translation, dtype=torch.float64)
    c, s = math.cos(params.rotation), math.sin(params.rotation)
    rot = torch.tensor([[c, -s], [s, c]], dtype=torch.float64) * params.scale
    return pts @ rot.T + disp + t


def _solve_tps(params: TPSParams) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Fit the interpolant mapping output coords to source coords.

    Returns (control points [T,2], radial weights [T,2], affine [3,2]); the
    map is x -> affine^T [1;x] + sum_i w_i U(|x - p_i|).
    """
    pts = torch.as_tensor(params.points, dtype=torch.float64)
    n = pts.shape[0]
    d2 = torch.cdist(pts, pts).pow(2)
    K = _radial_kernel(d2) + KERNEL_RIDGE * torch.eye(n, dtype=torch.float64)
    P = torch.cat([torch.ones(n, 1, dtype=torch.float64), pts], dim=1)
    L = torch.zeros(n + 3, n + 3, dtype=torch.float64)
    L[:n, :n] = K
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = torch.zeros(n + 3, 2, dtype=torch.float64)
    rhs[:n] = _affine_targets(params)
    try:
        sol = torch.linalg.solve(L, rhs)
    except torch.linalg.LinAlgError:
        # Degenerate lattices (coincident points) stay singular even with the
        # ridge; fall back to the minimum-norm least-squares solution.
        sol = torch.linalg.pinv(L) @ rhs
    return pts, sol[:n], sol[n:]


def warp_grid(
    params: TPSParams, h: int, w: int, dtype: torch.dtype = torch.float32, device=None
) -> torch.Tensor:
    """Sampling grid [h, w, 2] of normalized source coordinates per output pixel."""
    pts, weights, affine = _solve_tps(params)
    ys = torch.linspace(-1.0, 1.0, h, dtype=torch.float64)
    xs = torch.linspace(-1.0, 1.0, w, dtype=torch.float64)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([gx.ravel(), gy.ravel()], dim=1)  # [h*w, 2]
    d2 = torch.cdist(coords, pts).pow(2)
    radial = _radial_kernel(d2) @ weights  # [h*w, 2]
    ones = torch.ones(coords.shape[0], 1, dtype=torch.float64)
    mapped = torch.cat([ones, coords], dim=1) @ affine + radial
    return mapped.reshape(h, w, 2).to(dtype=dtype, device=device)


def warp(image: torch.Tensor, params: TPSParams) -> torch.Tensor:
    """Backward-warp ``image`` ([C,H,W] or [B,C,H,W]) by the given params."""
    if image.dim() not in (3, 4):
        raise InvalidInputError(f"image must be [C,H,W] or [B,C,H,W], got {tuple(image.shape)}")
    squeezed = image.dim() == 3
    batch = image.unsqueeze(0) if squeezed else image
    h, w = batch.shape[-2:]
    grid = warp_grid(params, h, w, dtype=batch.dtype, device=batch.device)
    grid = grid.unsqueeze(0).expand(batch.shape[0], -1, -1, -1)
    out = TF.grid_sample(
        batch, grid, mode="bilinear", padding_mode="border", align_corners=True
    )
    return out.squeeze(0) if squeezed else out


def valid_fraction(params: TPSParams, h: int, w: int) -> float:
    """Fraction of output pixels whose source sample lies inside the frame."""
    grid = warp_grid(params, h, w, dtype=torch.float64)
    inside = (grid.abs() <= 1.0).all(dim=-1)
    return float(inside.double().mean())


@dataclass
class ImagePair:
    """Two warps of one source image plus the parameters that made them."""

    x1: torch.Tensor
    x2: torch.Tensor
    params1: TPSParams
    params2: TPSParams


def make_pair(image: torch.Tensor, rng: np.random.Generator, cfg: TPSConfig) -> ImagePair:
    """Warp one source image twice with independently sampled params."""
    p1 = sample_tps(rng, cfg)
    p2 = sample_tps(rng, cfg)
    return ImagePair(x1=warp(image, p1), x2=warp(image, p2), params1=p1, params2=p2)


def identity_params(grid: int = 10) -> TPSParams:
    """Parameters of the do-nothing warp (useful in tests and probes)."""
    pts = control_lattice(grid)
    return TPSParams(
        points=pts,
        displacements=np.zeros_like(pts),
        translation=np.zeros(2),
    )
