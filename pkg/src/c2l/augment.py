"""Stochastic image augmentation producing the training views.

The pipeline order is fixed: crop -> rotate -> hflip -> grayscale ->
cutout.  Every sample gets its own random substream per primitive, keyed
by (sample index, op index), so disabling one primitive never shifts the
randomness seen by the others and samples can be processed in any order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# op indices used as rng subkeys; stable across versions
_OP_CROP, _OP_ROTATE, _OP_HFLIP, _OP_GRAYSCALE, _OP_CUTOUT = range(5)


class ImageBatch:
    """Z x C x H x W pixels in [0,1], at least two samples."""

    __slots__ = ("images",)

    def __init__(self, images):
        arr = np.asarray(images)
        if arr.ndim != 4:
            raise ValueError(f"ImageBatch expects [Z,C,H,W], got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise ValueError("ImageBatch needs Z >= 2 (mixup needs two samples)")
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"ImageBatch expects float pixels, got {arr.dtype}")
        lo, hi = float(arr.min()), float(arr.max())
        if not (0.0 <= lo and hi <= 1.0):
            raise ValueError(f"pixel values outside [0,1]: min {lo:g}, max {hi:g}")
        self.images = arr

    @property
    def z(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return self.images.shape

    def __repr__(self):
        return f"ImageBatch(shape={self.images.shape}, dtype={self.images.dtype.name})"


@dataclass
class AugmentConfig:
    crop_scale: tuple = (0.6, 1.0)  # sampled area fraction
    rotation_degrees: float = 10.0
    hflip_prob: float = 0.5
    cutout_count: int = 1
    cutout_size_fraction: float = 0.25
    crop_enabled: bool = True
    rotate_enabled: bool = True
    hflip_enabled: bool = True
    grayscale_enabled: bool = True
    cutout_enabled: bool = True

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0,1], got {self.hflip_prob}")
        if not 0.0 < self.cutout_size_fraction < 1.0:
            raise ValueError(
                f"cutout_size_fraction must be in (0,1), got {self.cutout_size_fraction}")
        if self.rotation_degrees < 0:
            raise ValueError("rotation_degrees must be non-negative")
        if self.cutout_count < 0:
            raise ValueError("cutout_count must be non-negative")

    @staticmethod
    def disabled():
        """Identity pipeline (every primitive off)."""
        return AugmentConfig(crop_enabled=False, rotate_enabled=False,
                             hflip_enabled=False, grayscale_enabled=False,
                             cutout_enabled=False)


def _bilinear_rows(img_rows, coords):
    """Sample rows at fractional positions with zero padding outside."""
    n = img_rows.shape[-1]
    f = np.floor(coords)
    t = coords - f
    i0 = f.astype(np.intp)
    i1 = i0 + 1
    m0 = (i0 >= 0) & (i0 < n)
    m1 = (i1 >= 0) & (i1 < n)
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i1, 0, n - 1)
    v0 = np.take_along_axis(img_rows, i0c, axis=-1) * m0
    v1 = np.take_along_axis(img_rows, i1c, axis=-1) * m1
    return v0 * (1.0 - t) + v1 * t


def crop_resize(images, tops, lefts, heights, widths):
    """Per-sample window crop resized back to full size, bilinear.

    ``tops/lefts/heights/widths`` are integer arrays of length Z defining
    each sample's source window.
    """
    z, c, h, w = images.shape
    if (heights < 1).any() or (widths < 1).any():
        raise ValueError("crop window degenerate (smaller than one pixel)")
    dt = images.dtype
    # source coordinate of each output row/column (align centers)
    oy = (np.arange(h, dtype=dt) + 0.5)[None, :] * (heights[:, None] / h) - 0.5
    ox = (np.arange(w, dtype=dt) + 0.5)[None, :] * (widths[:, None] / w) - 0.5
    ys = oy + tops[:, None]   # [Z,H] absolute fractional rows
    xs = ox + lefts[:, None]  # [Z,W]
    # separable bilinear: interpolate rows, then columns
    yf = np.floor(ys)
    ty = (ys - yf)[:, None, :, None]
    y0 = np.clip(yf.astype(np.intp), 0, h - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    zz = np.arange(z)[:, None]
    rows0 = images[zz[:, None], np.arange(c)[None, :, None], y0[:, None, :]]
    rows1 = images[zz[:, None], np.arange(c)[None, :, None], y1[:, None, :]]
    tmp = rows0 * (1.0 - ty) + rows1 * ty  # [Z,C,H,W]
    xsb = np.broadcast_to(xs[:, None, None, :], (z, c, h, w))
    return _bilinear_rows(tmp, xsb).astype(dt, copy=False)


def rotate(images, angles_degrees):
    """Rotate each image about its center, bilinear, zero fill outside.

    Accepts a batch [Z,C,H,W] with per-sample angles, or a single image
    [C,H,W] with a scalar angle.
    """
    single = np.asarray(images).ndim == 3
    imgs = images[None] if single else images
    angles = np.atleast_1d(np.asarray(angles_degrees, dtype=imgs.dtype))
    z, c, h, w = imgs.shape
    theta = np.deg2rad(angles)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=imgs.dtype) - cy,
                         np.arange(w, dtype=imgs.dtype) - cx, indexing="ij")
    # inverse map: source = R(-theta) (dest - center) + center
    ys = cos[:, None, None] * yy - sin[:, None, None] * xx + cy
    xs = sin[:, None, None] * yy + cos[:, None, None] * xx + cx
    yf = np.floor(ys)
    xf = np.floor(xs)
    ty = (ys - yf)[:, None]
    tx = (xs - xf)[:, None]
    y0 = yf.astype(np.intp)
    x0 = xf.astype(np.intp)
    out = None
    zz = np.arange(z)[:, None, None]
    for dy, wy in ((0, 1.0 - ty), (1, ty)):
        yi = y0 + dy
        my = ((yi >= 0) & (yi < h))[:, None]
        yic = np.clip(yi, 0, h - 1)[:, None]
        for dx, wx in ((0, 1.0 - tx), (1, tx)):
            xi = x0 + dx
            mx = ((xi >= 0) & (xi < w))[:, None]
            xic = np.clip(xi, 0, w - 1)[:, None]
            v = imgs[zz[:, None], np.arange(c)[None, :, None, None], yic, xic]
            term = v * (wy * wx) * (my & mx)
            out = term if out is None else out + term
    out = out.astype(imgs.dtype, copy=False)
    return out[0] if single else out


def cutout(images, centers_y, centers_x, side):
    """Zero one side x side square per image, centered per sample, clipped."""
    out = images.copy()
    h, w = images.shape[2], images.shape[3]
    half = side // 2
    for k in range(images.shape[0]):
        y0 = max(int(centers_y[k]) - half, 0)
        x0 = max(int(centers_x[k]) - half, 0)
        y1 = min(int(centers_y[k]) - half + side, h)
        x1 = min(int(centers_x[k]) - half + side, w)
        out[k, :, y0:y1, x0:x1] = 0.0
    return out


def grayscale(images):
    """Luma conversion replicated across channels; identity on 1 channel."""
    if images.shape[1] == 1:
        return images
    if images.shape[1] == 3:
        weights = np.asarray([0.299, 0.587, 0.114], dtype=images.dtype)
        gray = np.tensordot(weights, images, axes=([0], [1]))[:, None]
        return np.repeat(gray, 3, axis=1)
    raise ValueError(f"grayscale supports 1 or 3 channels, got {images.shape[1]}")


def augment_batch(batch, rng, config):
    """Apply the full pipeline with per-sample randomness; returns a new batch."""
    imgs = batch.images
    z, c, h, w = imgs.shape

    if config.crop_enabled:
        lo, hi = config.crop_scale
        tops = np.empty(z, dtype=np.intp)
        lefts = np.empty(z, dtype=np.intp)
        hs = np.empty(z, dtype=np.intp)
        ws = np.empty(z, dtype=np.intp)
        for k in range(z):
            s = rng.child(k, _OP_CROP)
            side = np.sqrt(s.uniform(lo, hi))
            hs[k] = max(int(round(h * side)), 1)
            ws[k] = max(int(round(w * side)), 1)
            tops[k] = s.integers(0, h - hs[k] + 1)
            lefts[k] = s.integers(0, w - ws[k] + 1)
        imgs = crop_resize(imgs, tops, lefts, hs, ws)

    if config.rotate_enabled and config.rotation_degrees > 0:
        angles = np.array([
            rng.child(k, _OP_ROTATE).uniform(-config.rotation_degrees,
                                             config.rotation_degrees)
            for k in range(z)], dtype=imgs.dtype)
        imgs = rotate(imgs, angles)

    if config.hflip_enabled:
        flips = np.array([rng.child(k, _OP_HFLIP).random() < config.hflip_prob
                          for k in range(z)])
        if flips.any():
            imgs = imgs.copy()
            imgs[flips] = imgs[flips, :, :, ::-1]

    if config.grayscale_enabled:
        imgs = grayscale(imgs)

    if config.cutout_enabled and config.cutout_count > 0:
        side = int(round(config.cutout_size_fraction * min(h, w)))
        for hole in range(config.cutout_count):
            cys = np.empty(z, dtype=np.intp)
            cxs = np.empty(z, dtype=np.intp)
            for k in range(z):
                s = rng.child(k, _OP_CUTOUT, hole)
                cys[k] = s.integers(0, h)
                cxs[k] = s.integers(0, w)
            imgs = cutout(imgs, cys, cxs, side)

    if imgs is batch.images:
        return ImageBatch(imgs.copy())
    return ImageBatch(np.clip(imgs, 0.0, 1.0))
