"""Training losses: perceptual-quantizer color space, SSIM, geometry terms.

The color terms run through torch so their adjoints come from autograd; the
per-pixel gradients are then handed to the ray-level adjoint kernel. The
numpy transfer functions are kept as exact twins for I/O and metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError

# SMPTE ST-2084 style perceptual quantizer constants
PQ_M1 = 2610.0 / 16384.0
PQ_M2 = 2523.0 / 4096.0 * 128.0
PQ_C1 = 3424.0 / 4096.0
PQ_C2 = 2413.0 / 4096.0 * 32.0
PQ_C3 = 2392.0 / 4096.0 * 32.0

DEFAULT_PQ_PEAK = 100.0

DEFAULT_LAMBDA_COLOR = 1.0
DEFAULT_LAMBDA_NORMAL = 0.5
DEFAULT_LAMBDA_DISTANCE = 0.05
DEFAULT_LAMBDA_EMISSION = 0.1

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def pq_encode(x, peak: float = DEFAULT_PQ_PEAK):
    """Map linear radiance (0..peak) to the perceptually uniform 0..1 range."""
    y = np.clip(np.asarray(x, dtype=np.float64) / peak, 0.0, 1.0)
    ym = y ** PQ_M1
    return ((PQ_C1 + PQ_C2 * ym) / (1.0 + PQ_C3 * ym)) ** PQ_M2


def pq_decode(v, peak: float = DEFAULT_PQ_PEAK):
    """Inverse of pq_encode on the encoded 0..1 range."""
    vp = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0) ** (1.0 / PQ_M2)
    num = np.maximum(vp - PQ_C1, 0.0)
    return peak * (num / (PQ_C2 - PQ_C3 * vp)) ** (1.0 / PQ_M1)


def pq_derivative(x, peak: float = DEFAULT_PQ_PEAK):
    """d pq_encode / dx, zero outside the clipped (0, peak) interval."""
    x = np.asarray(x, dtype=np.float64)
    y = x / peak
    inside = (y > 0.0) & (y < 1.0)
    ys = np.where(inside, y, 0.5)
    ym = ys ** PQ_M1
    f = (PQ_C1 + PQ_C2 * ym) / (1.0 + PQ_C3 * ym)
    df_dym = (PQ_C2 - PQ_C3 * PQ_C1) / (1.0 + PQ_C3 * ym) ** 2
    d = PQ_M2 * f ** (PQ_M2 - 1.0) * df_dym * PQ_M1 * ys ** (PQ_M1 - 1.0) / peak
    return np.where(inside, d, 0.0)


def pq_encode_torch(x: torch.Tensor, peak: float = DEFAULT_PQ_PEAK) -> torch.Tensor:
    y = torch.clamp(x / peak, 0.0, 1.0)
    # y ** m1 has an infinite derivative at 0; route zero pixels through a
    # constant branch so the forward stays exact and the subgradient is 0
    pos = y > 0.0
    ym = torch.where(pos, y, torch.ones_like(y)) ** PQ_M1
    ym = torch.where(pos, ym, y * 0.0)  # y*0 keeps NaN inputs NaN
    return ((PQ_C1 + PQ_C2 * ym) / (1.0 + PQ_C3 * ym)) ** PQ_M2


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    half = (size - 1) / 2.0
    xs = torch.arange(size, dtype=torch.float64) - half
    g = torch.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


_SSIM_KERNEL = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA).reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean structural similarity over an HxWxC pair (values near 0..1)."""
    if a.shape != b.shape:
        raise InvalidInputError("ssim inputs must share a shape")
    x = a.permute(2, 0, 1).unsqueeze(1).to(torch.float64)
    y = b.permute(2, 0, 1).unsqueeze(1).to(torch.float64)
    win = _SSIM_KERNEL.to(x.dtype)
    pad = SSIM_WINDOW // 2
    mu_x = F.conv2d(x, win, padding=pad)
    mu_y = F.conv2d(y, win, padding=pad)
    mu_x2 = mu_x * mu_x
    mu_y2 = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sig_x = F.conv2d(x * x, win, padding=pad) - mu_x2
    sig_y = F.conv2d(y * y, win, padding=pad) - mu_y2
    sig_xy = F.conv2d(x * y, win, padding=pad) - mu_xy
    num = (2.0 * mu_xy + SSIM_C1) * (2.0 * sig_xy + SSIM_C2)
    den = (mu_x2 + mu_y2 + SSIM_C1) * (sig_x + sig_y + SSIM_C2)
    return (num / den).mean()


def loss_color(pred_linear: torch.Tensor, gt_linear: torch.Tensor,
               peak: float = DEFAULT_PQ_PEAK) -> torch.Tensor:
    """0.8 L1 + 0.2 (1 - SSIM), both on perceptually encoded images."""
    p = pq_encode_torch(pred_linear, peak)
    g = pq_encode_torch(gt_linear, peak)
    l1 = (p - g).abs().mean()
    return 0.8 * l1 + 0.2 * (1.0 - ssim(p, g))


def loss_normal(n_pred: torch.Tensor, n_gt: torch.Tensor,
                valid: torch.Tensor) -> torch.Tensor:
    """Mean (1 - cos) between rendered and reference normals on valid pixels."""
    dots = (n_pred * n_gt).sum(dim=-1)
    mask = valid.to(dots.dtype)
    denom = mask.sum().clamp(min=1.0)
    return ((1.0 - dots) * mask).sum() / denom


def points_from_depth(depth: torch.Tensor, dirs: torch.Tensor,
                      origin: torch.Tensor) -> torch.Tensor:
    """Per-pixel surface points from composited distances and ray directions."""
    return origin.reshape(1, 1, 3) + depth.unsqueeze(-1) * dirs


def normals_from_points(points: torch.Tensor) -> torch.Tensor:
    """Cross product of screen-space finite differences, unit length.

    Orientation matches the compositing convention (normals face the camera):
    d/dy x d/dx for a camera with x right / y down and +z forward.
    """
    dx = points[:, 2:, :] - points[:, :-2, :]
    dy = points[2:, :, :] - points[:-2, :, :]
    dx = dx[1:-1, :, :]
    dy = dy[:, 1:-1, :]
    n = torch.cross(dy, dx, dim=-1)
    norm = n.norm(dim=-1, keepdim=True)
    return n / norm.clamp(min=1e-12)


def loss_distance_normal(depth: torch.Tensor, dirs: torch.Tensor,
                         origin: torch.Tensor, n_pred: torch.Tensor,
                         valid: torch.Tensor) -> torch.Tensor:
    """Consistency between the depth-derived normal map and rendered normals.

    Only the interior (pixels whose full finite-difference stencil is valid)
    participates. n_pred is treated as the reference; gradients flow through
    both terms.
    """
    points = points_from_depth(depth, dirs, origin)
    n_depth = normals_from_points(points)
    inner = valid[1:-1, 1:-1] & valid[:-2, 1:-1] & valid[2:, 1:-1] \
        & valid[1:-1, :-2] & valid[1:-1, 2:]
    dots = (n_depth * n_pred[1:-1, 1:-1]).sum(dim=-1)
    mask = inner.to(dots.dtype)
    denom = mask.sum().clamp(min=1.0)
    return ((1.0 - dots) * mask).sum() / denom


def loss_emission(e_pred: torch.Tensor, mask_gt: torch.Tensor) -> torch.Tensor:
    """L1 between composited emission and the binary emitter mask."""
    return (e_pred - mask_gt).abs().mean()


@dataclass
class LossWeights:
    color: float = DEFAULT_LAMBDA_COLOR
    normal: float = DEFAULT_LAMBDA_NORMAL
    distance: float = DEFAULT_LAMBDA_DISTANCE
    emission: float = DEFAULT_LAMBDA_EMISSION
