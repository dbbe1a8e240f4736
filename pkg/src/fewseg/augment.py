"""Weak/strong augmentation with invertible geometric records.

Weak augmentation applies label-preserving geometry only (horizontal flip,
random scale, crop or pad back to the original size).  Strong augmentation
applies the *same family* of geometric draws plus photometric distortion
(color jitter, Gaussian blur, random grayscale), which never touches masks.

Geometry is drawn from a dedicated RNG stream so that ``augment(x, weak, s)``
and ``augment(x, strong, s)`` share an identical geometric record for the
same seed.  Each record is an axis-aligned affine map from original pixel
coordinates to view coordinates, so predictions made in one view can be
warped into another view's frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

_GEOM_STREAM = 0
_PHOTO_STREAM = 1


@dataclass(frozen=True)
class GeometryRecord:
    """Axis-aligned affine view transform: ``p_view = scale * p_orig + offset``.

    Coordinates follow the pixel-center convention used by bilinear resize
    (``y_view = s * (y_orig + 0.5) - 0.5 - shift``), so warping through a
    record composes exactly with the interpolation that produced the view.
    """

    flip: bool
    scale: float
    shift_y: float  # view = scaled - shift
    shift_x: float
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]

    def coeffs(self) -> tuple[float, float, float, float]:
        """(ay, by, ax, bx) with y_view = ay*y + by, x_view = ax*x + bx.

        The horizontal flip is folded into (ax, bx) since it commutes with
        scaling about pixel centers.
        """
        h_in, w_in = self.in_hw
        sy = round(h_in * self.scale) / h_in
        sx = round(w_in * self.scale) / w_in
        ay, by = sy, 0.5 * sy - 0.5 - self.shift_y
        if self.flip:
            # x' = w_in - 1 - x before scaling
            ax = -sx
            bx = sx * (w_in - 1 + 0.5) - 0.5 - self.shift_x
        else:
            ax, bx = sx, 0.5 * sx - 0.5 - self.shift_x
        return ay, by, ax, bx


IDENTITY_OPS = ()
WEAK_OPS = ("hflip", "scale", "crop")
STRONG_OPS = WEAK_OPS + ("color_jitter", "gaussian_blur", "grayscale")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Named transform list with parameter ranges."""

    kind: str  # "weak" | "strong"
    ops: tuple = WEAK_OPS
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    jitter: float = 0.3
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.5)
    gray_prob: float = 0.05


def weak_policy(**kw) -> AugmentationPolicy:
    return AugmentationPolicy(kind="weak", ops=WEAK_OPS, **kw)


def strong_policy(**kw) -> AugmentationPolicy:
    return AugmentationPolicy(kind="strong", ops=STRONG_OPS, **kw)


def identity_policy() -> AugmentationPolicy:
    return AugmentationPolicy(kind="weak", ops=IDENTITY_OPS, flip_prob=0.0,
                              scale_range=(1.0, 1.0))


def _resize_image(img: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(img).permute(2, 0, 1)[None].float()
    t = F.interpolate(t, size=hw, mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def _resize_mask(mask: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    t = F.interpolate(t, size=hw, mode="nearest")
    return t[0, 0].numpy().astype(mask.dtype)


def augment(image, policy: AugmentationPolicy, rng_seed: int, mask=None):
    """Apply a policy; returns (image, mask_or_None, GeometryRecord).

    Geometric ops move image and mask in lockstep; photometric ops touch the
    image only.  The record maps original pixel coordinates to view
    coordinates (output size equals input size).
    """
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    geom_rng = np.random.default_rng([int(rng_seed), _GEOM_STREAM])
    # Fixed draw count keeps weak/strong geometry identical for a shared seed.
    u_flip, u_scale, u_offy, u_offx = geom_rng.random(4)

    flip = "hflip" in policy.ops and u_flip < policy.flip_prob
    lo, hi = policy.scale_range
    scale = lo + (hi - lo) * u_scale if "scale" in policy.ops else 1.0
    h2, w2 = round(h * scale), round(w * scale)

    if flip:
        img = img[:, ::-1].copy()
        if mask is not None:
            mask = mask[:, ::-1].copy()
    if (h2, w2) != (h, w):
        img = _resize_image(img, (h2, w2))
        if mask is not None:
            mask = _resize_mask(mask, (h2, w2))

    # Crop back if scaled up, pad (zero image, background mask) if scaled down.
    shift_y = _span_offset(u_offy, h2 - h)
    shift_x = _span_offset(u_offx, w2 - w)
    img = _crop_or_pad(img, shift_y, shift_x, (h, w))
    if mask is not None:
        mask = _crop_or_pad(mask, shift_y, shift_x, (h, w))

    record = GeometryRecord(flip=flip, scale=scale, shift_y=float(shift_y),
                            shift_x=float(shift_x), in_hw=(h, w), out_hw=(h, w))

    if policy.kind == "strong":
        img = _photometric(img, policy, np.random.default_rng([int(rng_seed), _PHOTO_STREAM]))

    return img.astype(np.float32), mask, record


def _span_offset(u: float, span: int) -> int:
    """Offset of the view inside the scaled canvas (negative means padding)."""
    if span > 0:
        return int(u * (span + 1)) if span else 0  # crop start in [0, span]
    if span < 0:
        return -int(u * (-span + 1))  # placement start, recorded as negative
    return 0


def _crop_or_pad(arr: np.ndarray, shift_y: int, shift_x: int, hw):
    h, w = hw
    h2, w2 = arr.shape[:2]
    out_shape = (h, w) + arr.shape[2:]
    out = np.zeros(out_shape, dtype=arr.dtype)
    # Source window in the scaled array, destination window in the output.
    sy0, dy0 = (shift_y, 0) if shift_y >= 0 else (0, -shift_y)
    sx0, dx0 = (shift_x, 0) if shift_x >= 0 else (0, -shift_x)
    cy = min(h2 - sy0, h - dy0)
    cx = min(w2 - sx0, w - dx0)
    out[dy0:dy0 + cy, dx0:dx0 + cx] = arr[sy0:sy0 + cy, sx0:sx0 + cx]
    return out


# ---- photometric ops -------------------------------------------------------

def _photometric(img: np.ndarray, policy: AugmentationPolicy, rng) -> np.ndarray:
    if "color_jitter" in policy.ops:
        j = policy.jitter
        b, c, s = (1.0 + j * (2 * rng.random(3) - 1)).astype(np.float32)
        tint = (1.0 + 0.5 * j * (2 * rng.random(3) - 1)).astype(np.float32)
        img = img * b * tint
        mean = img.mean(axis=(0, 1), keepdims=True)
        img = (img - mean) * c + mean
        gray = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        img = gray[..., None] + (img - gray[..., None]) * s
    if "gaussian_blur" in policy.ops and rng.random() < policy.blur_prob:
        lo, hi = policy.blur_sigma
        img = _gaussian_blur(img, lo + (hi - lo) * rng.random())
    if "grayscale" in policy.ops and rng.random() < policy.gray_prob:
        gray = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        img = np.repeat(gray[..., None], 3, axis=-1)
    return np.clip(img, 0.0, 1.0)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(3 * sigma + 0.5))
    xs = np.arange(-radius, radius + 1, dtype=np.float32)
    k = np.exp(-0.5 * (xs / sigma) ** 2).astype(np.float32)
    k /= k.sum()
    kt = torch.from_numpy(k)
    t = torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1)[None]
    pad = (radius, radius)
    t = F.conv2d(F.pad(t, pad + (0, 0), mode="reflect"),
                 kt.view(1, 1, 1, -1).expand(3, 1, 1, -1), groups=3)
    t = F.conv2d(F.pad(t, (0, 0) + pad, mode="reflect"),
                 kt.view(1, 1, -1, 1).expand(3, 1, -1, 1), groups=3)
    return t[0].permute(1, 2, 0).numpy()


# ---- frame mapping ---------------------------------------------------------

def warp_between_frames(tensor: torch.Tensor, src: GeometryRecord,
                        dst: GeometryRecord, mode: str = "bilinear") -> torch.Tensor:
    """Resample a (C, H, W) map from ``src``'s view frame into ``dst``'s.

    Both records must describe views of the same original image.  Out-of-view
    regions are filled with zeros.
    """
    ay_s, by_s, ax_s, bx_s = src.coeffs()
    ay_d, by_d, ax_d, bx_d = dst.coeffs()
    h_d, w_d = dst.out_hw
    h_s, w_s = src.out_hw

    ys = torch.arange(h_d, dtype=tensor.dtype, device=tensor.device)
    xs = torch.arange(w_d, dtype=tensor.dtype, device=tensor.device)
    # dst view -> original -> src view
    y_src = ay_s * ((ys - by_d) / ay_d) + by_s
    x_src = ax_s * ((xs - bx_d) / ax_d) + bx_s
    gy = (y_src + 0.5) / h_s * 2 - 1
    gx = (x_src + 0.5) / w_s * 2 - 1
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij"), dim=-1)
    grid = grid.flip(-1)[None]  # grid_sample wants (x, y) order
    out = F.grid_sample(tensor[None], grid, mode=mode,
                        padding_mode="zeros", align_corners=False)
    return out[0]
