"""Affine transform prediction and consistent image/mask warping.

Transforms act in normalized coordinates (x_n = (x_pix - c)/h with c the
pixel-center of the array and h the half-extent) and map DESTINATION points
to SOURCE points, the usual resampling convention. The sampler folds the
normalized matrix into pixel space as

    x_src = c_x + a*(x - c_x) + b*(h_x/h_y)*(y - c_y) + t_x*h_x

which makes the identity transform algebraically exact: every term is either
0 or the original coordinate, so identity warps are bit-identical for any
array size, not merely close.

Bounded parameterization: raw STN outputs u are squashed per-component,
    scale   = exp(tanh(u) * ln sqrt(2))   -> det(linear) in [1/2, 2]
    rotation = tanh(u) * pi/6             -> |theta| <= 30 degrees
    shear   = tanh(u) * 0.2
    translation = tanh(u) * 0.25          -> |t| <= 0.25 per axis
Zero raw parameters give the exact identity, matching the localizer's
zero-initialized head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .nets import StnLocalizer

SCALE_LOG_BOUND = 0.5 * math.log(2.0)
ROTATION_BOUND = math.pi / 6.0
SHEAR_BOUND = 0.2
TRANSLATION_BOUND = 0.25

PARAM_NAMES = ("scale_x", "scale_y", "rotation", "shear", "t_x", "t_y")


@dataclass(frozen=True)
class AffineTransform:
    """2x3 destination-to-source affine in normalized coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @staticmethod
    def from_params(scale_x: float, scale_y: float, rotation: float,
                    shear: float, t_x: float, t_y: float) -> "AffineTransform":
        """Compose R(rotation) @ Shear @ diag(scales) plus translation.

        Accepts arbitrary values (tests exercise out-of-range warps);
        `within_bounds` reports whether the invariants hold.
        """
        cos, sin = math.cos(rotation), math.sin(rotation)
        lin = np.array([
            [cos * scale_x, cos * shear * scale_y - sin * scale_y],
            [sin * scale_x, sin * shear * scale_y + cos * scale_y],
        ])
        return AffineTransform(np.column_stack([lin, [t_x, t_y]]))

    @staticmethod
    def from_raw(raw) -> "AffineTransform":
        """Squash 6 unconstrained reals into the bounded parameter ranges."""
        return AffineTransform.from_params(*squash_params(np.asarray(raw)))

    def decompose(self) -> dict[str, float]:
        """Recover (scales, rotation, shear, translation) from the matrix."""
        lin = self.matrix[:, :2]
        theta = math.atan2(lin[1, 0], lin[0, 0])
        scale_x = math.hypot(lin[0, 0], lin[1, 0])
        cos, sin = math.cos(theta), math.sin(theta)
        scale_y = -sin * lin[0, 1] + cos * lin[1, 1]
        shear = (cos * lin[0, 1] + sin * lin[1, 1]) / scale_y if scale_y else 0.0
        return {
            "scale_x": scale_x, "scale_y": scale_y, "rotation": theta,
            "shear": shear, "t_x": float(self.matrix[0, 2]),
            "t_y": float(self.matrix[1, 2]),
        }

    def determinant(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))

    def within_bounds(self, atol: float = 1e-6) -> bool:
        # atol absorbs float32 rounding when matrices come from the torch path
        d = self.decompose()
        return (
            0.5 - atol <= self.determinant() <= 2.0 + atol
            and abs(d["rotation"]) <= ROTATION_BOUND + atol
            and abs(d["t_x"]) <= TRANSLATION_BOUND + atol
            and abs(d["t_y"]) <= TRANSLATION_BOUND + atol
        )

    def inverse(self) -> "AffineTransform":
        lin = self.matrix[:, :2]
        inv = np.linalg.inv(lin)
        t = -inv @ self.matrix[:, 2]
        return AffineTransform(np.column_stack([inv, t]))


def squash_params(raw: np.ndarray) -> tuple[float, float, float, float, float, float]:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (6,):
        raise ValueError("expected 6 raw parameters")
    sx = math.exp(math.tanh(raw[0]) * SCALE_LOG_BOUND)
    sy = math.exp(math.tanh(raw[1]) * SCALE_LOG_BOUND)
    theta = math.tanh(raw[2]) * ROTATION_BOUND
    shear = math.tanh(raw[3]) * SHEAR_BOUND
    t_x = math.tanh(raw[4]) * TRANSLATION_BOUND
    t_y = math.tanh(raw[5]) * TRANSLATION_BOUND
    return sx, sy, theta, shear, t_x, t_y


def squash_params_t(raw: torch.Tensor) -> torch.Tensor:
    """Batched differentiable squash: (B,6) raw -> (B,2,3) matrices."""
    sx = torch.exp(torch.tanh(raw[:, 0]) * SCALE_LOG_BOUND)
    sy = torch.exp(torch.tanh(raw[:, 1]) * SCALE_LOG_BOUND)
    theta = torch.tanh(raw[:, 2]) * ROTATION_BOUND
    shear = torch.tanh(raw[:, 3]) * SHEAR_BOUND
    t_x = torch.tanh(raw[:, 4]) * TRANSLATION_BOUND
    t_y = torch.tanh(raw[:, 5]) * TRANSLATION_BOUND
    cos, sin = torch.cos(theta), torch.sin(theta)
    row0 = torch.stack([cos * sx, cos * shear * sy - sin * sy, t_x], dim=1)
    row1 = torch.stack([sin * sx, sin * shear * sy + cos * sy, t_y], dim=1)
    return torch.stack([row0, row1], dim=1)


# ------------------------------------------------------------------ warping
def _source_coords(A: torch.Tensor, h: int, w: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-destination-pixel source coordinates, (B,H,W) each, pixel units."""
    dtype = A.dtype
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    hy, hx = h / 2.0, w / 2.0
    ys = torch.arange(h, dtype=dtype, device=A.device) - cy
    xs = torch.arange(w, dtype=dtype, device=A.device) - cx
    yy = ys[:, None].expand(h, w)
    xx = xs[None, :].expand(h, w)
    a, b, tx = A[:, 0, 0], A[:, 0, 1], A[:, 0, 2]
    c, d, ty = A[:, 1, 0], A[:, 1, 1], A[:, 1, 2]
    x_src = cx + a[:, None, None] * xx + (b * (hx / hy))[:, None, None] * yy \
        + (tx * hx)[:, None, None]
    y_src = cy + (c * (hy / hx))[:, None, None] * xx + d[:, None, None] * yy \
        + (ty * hy)[:, None, None]
    return y_src, x_src


def warp_image_batch(images: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """Bilinear warp of (B,C,H,W) by per-sample (B,2,3) matrices.

    Out-of-bounds samples take each image's own minimum intensity (air).
    Differentiable with respect to A through the interpolation weights.
    """
    b, ch, h, w = images.shape
    y_src, x_src = _source_coords(A.to(images.dtype), h, w)
    x0 = torch.floor(x_src)
    y0 = torch.floor(y_src)
    fx = x_src - x0
    fy = y_src - y0
    inside = (x_src >= 0) & (x_src <= w - 1) & (y_src >= 0) & (y_src <= h - 1)

    x0i = x0.long().clamp(0, w - 1)
    y0i = y0.long().clamp(0, h - 1)
    x1i = (x0i + 1).clamp(0, w - 1)
    y1i = (y0i + 1).clamp(0, h - 1)

    flat = images.reshape(b, ch, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, ch, h * w)
        return flat.gather(2, idx).reshape(b, ch, h, w)

    wx = fx[:, None]
    wy = fy[:, None]
    out = (
        gather(y0i, x0i) * (1 - wy) * (1 - wx)
        + gather(y0i, x1i) * (1 - wy) * wx
        + gather(y1i, x0i) * wy * (1 - wx)
        + gather(y1i, x1i) * wy * wx
    )
    fill = images.amin(dim=(2, 3), keepdim=True)
    return torch.where(inside[:, None], out, fill)


def warp_mask_batch(masks: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor warp of (B,H,W) integer masks; out-of-bounds -> 0."""
    b, h, w = masks.shape
    y_src, x_src = _source_coords(A.to(torch.float64), h, w)
    xi = torch.floor(x_src + 0.5).long()
    yi = torch.floor(y_src + 0.5).long()
    inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
    xi = xi.clamp(0, w - 1)
    yi = yi.clamp(0, h - 1)
    flat = masks.reshape(b, h * w)
    out = flat.gather(1, (yi * w + xi).reshape(b, h * w)).reshape(b, h, w)
    return torch.where(inside, out, torch.zeros_like(out))


def _single(arr: np.ndarray, A: AffineTransform, kind: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr))
    m = torch.from_numpy(A.matrix)
    if kind == "image":
        out = warp_image_batch(t[None, None].to(torch.float64), m[None])
        return out[0, 0].numpy()
    out = warp_mask_batch(t[None], m[None])
    return out[0].numpy()


def warp_image(image: np.ndarray, A: AffineTransform) -> np.ndarray:
    """Bilinear warp of one H×W image; see warp_image_batch."""
    return _single(np.asarray(image, dtype=np.float64), A, "image")


def warp_mask(mask: np.ndarray, A: AffineTransform) -> np.ndarray:
    """Nearest-neighbor warp of one H×W label mask; labels never interpolate."""
    return _single(np.asarray(mask, dtype=np.int64), A, "mask")


# ---------------------------------------------------------------- STN layer
def mask_onehot(masks: torch.Tensor, n_labels: int) -> torch.Tensor:
    """(B,H,W) integer masks -> (B,n,H,W) float one-hot."""
    return torch.nn.functional.one_hot(masks.long(), n_labels) \
        .permute(0, 3, 1, 2).to(torch.float32)


def predict_affine_batch(stn: StnLocalizer, masks: torch.Tensor,
                         cond: torch.Tensor, n_labels: int) -> torch.Tensor:
    """(B,H,W) masks + (B,2) conditions -> (B,2,3) bounded matrices."""
    raw = stn(mask_onehot(masks, n_labels), cond)
    return squash_params_t(raw)


def predict_affine(stn: StnLocalizer, mask: np.ndarray, cond: np.ndarray,
                   n_labels: int) -> AffineTransform:
    """Single-sample wrapper returning an AffineTransform."""
    with torch.no_grad():
        m = predict_affine_batch(
            stn,
            torch.from_numpy(np.asarray(mask, dtype=np.int64))[None],
            torch.as_tensor(np.asarray(cond, dtype=np.float32))[None],
            n_labels,
        )
    return AffineTransform(m[0].to(torch.float64).numpy())
