"""Dataset files and the synthetic corpus generator.

Images are 8-bit grayscale binary PGM (P5): trivially bit-exact on
every platform, so corpus hashes are stable. Each split directory holds
the images, a ``manifest.csv`` (header ``path`` or
``path,label_0,...``), and a ``meta.json`` sidecar with the image size
and class names.

The generator draws every image from its own RNG stream keyed by
(seed, split, index) and uses only +,-,*,/, sqrt and floor in the
write path (no transcendentals), so the same seed yields the same
bytes anywhere.
Each image is a field of small shapes: soft discs for class 0, short
bars sharing one per-image orientation for class 1. Count, size, and
amplitude follow the same law for both classes, so only the
micro-shape separates them; the per-image count, base size,
orientation, and grain level give every image a texture signature
that survives cropping and flipping.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

_SQRT3 = 1.7320508075688772


# ---------------------------------------------------------------------------
# PGM codec


def quantize(img):
    """[0,1] float image to uint8 via floor(x*255 + 0.5)."""
    arr = np.asarray(img)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("quantize expects values in [0, 1]")
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, img):
    """Write a uint8 [H,W] array as binary PGM (P5, maxval 255)."""
    arr = np.ascontiguousarray(img)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError(f"write_pgm expects a uint8 [H,W] array, "
                         f"got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path):
    """Read a binary PGM into a uint8 [H,W] array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    # header: magic, width, height, maxval; '#' comments allowed
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise ValueError(f"{path}: bad PGM header: {e}") from e
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pixels = data[pos:]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, "
                         f"got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# Dataset loading


class Dataset:
    """Eagerly loaded split: images in [0,1] plus optional labels."""

    def __init__(self, images, labels, paths, class_names, image_size):
        self.images = images  # [M, 1, H, W] float32
        self.labels = labels  # [M, C] int8 or None
        self.paths = paths
        self.class_names = class_names
        self.image_size = image_size

    def __len__(self):
        return self.images.shape[0]

    def __repr__(self):
        kind = "labeled" if self.labels is not None else "unlabeled"
        return (f"Dataset({len(self)} {kind} images, "
                f"size={self.image_size})")


def load_dataset(manifest_path):
    """Load every entry of a split, in manifest order, scaled to [0,1]."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    meta_path = os.path.join(root, "meta.json")
    class_names = ()
    expected_size = None
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        class_names = tuple(meta.get("class_names", ()))
        if "image_size" in meta:
            expected_size = tuple(meta["image_size"])
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{manifest_path}: empty manifest")
    header = rows[0]
    if header[0] != "path":
        raise ValueError(f"{manifest_path}: first column must be 'path', "
                         f"got {header[0]!r}")
    label_cols = header[1:]
    for i, col in enumerate(label_cols):
        if col != f"label_{i}":
            raise ValueError(f"{manifest_path}: bad label column {col!r}")
    images = []
    labels = [] if label_cols else None
    paths = []
    for row in rows[1:]:
        rel = row[0]
        full = os.path.join(root, rel)
        try:
            img = read_pgm(full)
        except FileNotFoundError:
            raise ValueError(f"{manifest_path}: entry {rel!r}: file missing")
        except ValueError as e:
            raise ValueError(f"{manifest_path}: entry {rel!r}: {e}") from e
        if expected_size is not None and img.shape != expected_size:
            raise ValueError(f"{manifest_path}: entry {rel!r}: size "
                             f"{img.shape} != expected {expected_size}")
        if expected_size is None:
            expected_size = img.shape
        images.append(img)
        paths.append(rel)
        if labels is not None:
            vec = [int(v) for v in row[1:]]
            if len(vec) != len(label_cols) or any(v not in (0, 1) for v in vec):
                raise ValueError(f"{manifest_path}: entry {rel!r}: bad "
                                 f"label vector {row[1:]}")
            labels.append(vec)
    stack = (np.stack(images).astype(np.float32) / 255.0)[:, None]
    label_arr = np.array(labels, dtype=np.int8) if labels is not None else None
    return Dataset(stack, label_arr, paths, class_names, expected_size)


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass
class SynthConfig:
    num_unlabeled: int = 2000
    num_labeled_train: int = 200
    num_labeled_test: int = 200
    image_size: tuple = (64, 64)
    noise_sigma: float = 0.03
    position_jitter: float = 0.35  # of a layout cell, for shape centers
    seed: int = 0
    class_names: tuple = ("disc", "bar")

    def __post_init__(self):
        for field in ("num_unlabeled", "num_labeled_train", "num_labeled_test"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError(f"image_size too small: {self.image_size}")
        self.image_size = (int(h), int(w))
        if len(self.class_names) != 2:
            raise ValueError("exactly two class recipes are implemented")


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _disc_mask(yy, xx, cy, cx, radius, feather):
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    outer, inner = radius ** 2, (radius * (1.0 - feather)) ** 2
    return _smoothstep((outer - r2) / (outer - inner))


def _bar_mask(yy, xx, cy, cx, dir_y, dir_x, half_len, half_wid, feather):
    along = (yy - cy) * dir_y + (xx - cx) * dir_x
    across = -(yy - cy) * dir_x + (xx - cx) * dir_y
    edge_l = half_len * feather
    edge_w = half_wid * feather
    m1 = _smoothstep((half_len - np.abs(along)) / edge_l)
    m2 = _smoothstep((half_wid - np.abs(across)) / edge_w)
    return m1 * m2


def _unit_direction(rng):
    # point on the diamond |x|+|y|=1, normalized; avoids trig entirely
    t = rng.uniform(-1.0, 1.0)
    sign = 1.0 if rng.uniform(0.0, 1.0) < 0.5 else -1.0
    y, x = t, sign * (1.0 - abs(t))
    norm = np.sqrt(y * y + x * x)
    return y / norm, x / norm


def _jitter_direction(dy, dx, eps):
    # rotate (dy, dx) by atan(eps) without trig: add eps of the
    # perpendicular and renormalize
    jy, jx = dy + eps * dx, dx - eps * dy
    norm = np.sqrt(jy * jy + jx * jx)
    return jy / norm, jx / norm


def _irwin_hall_noise(rng, shape, sigma):
    # sum of 4 uniforms, centered and scaled to unit variance
    total = np.zeros(shape)
    for _ in range(4):
        total += rng.uniform(0.0, 1.0, size=shape)
    return (total - 2.0) * _SQRT3 * sigma


def render_image(config, cls, rng):
    """One [0,1] float image: a shape field of class 0 (discs) or
    class 1 (bars sharing one per-image orientation).

    The per-image count, base size, amplitude, edge softness, ring
    wavelength, orientation, and grain level act as a texture
    signature; they follow the same law for both classes, so only the
    micro-shape carries the label. Shapes sit on a jittered grid so
    any crop window sees a representative sample of the field.
    """
    h, w = config.image_size
    scale = min(h, w) / 64.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    bg = rng.child("bg")
    img = np.full((h, w), bg.uniform(0.28, 0.42))
    img += bg.uniform(-0.08, 0.08) * (xx / w - 0.5)
    img += bg.uniform(-0.08, 0.08) * (yy / h - 0.5)

    # two broad faint blotches: slow nuisance structure under the field
    bl = rng.child("blotch")
    for k in range(2):
        bk = bl.child(k)
        img += bk.uniform(-0.05, 0.05) * _disc_mask(
            yy, xx, bk.uniform(0.2 * h, 0.8 * h), bk.uniform(0.2 * w, 0.8 * w),
            bk.uniform(10.0, 18.0) * scale, feather=0.9)

    # faint concentric ripple over the whole frame: spreads edge energy
    # so shape outlines are not the only gradients in the image, and its
    # per-image wavelength extends the texture signature. Rings rather
    # than straight bands: locally oriented but orientation-balanced
    # over the frame, so they do not mimic the bars' common direction.
    rp = rng.child("ripple")
    rcy = rp.uniform(-0.25 * h, 1.25 * h)
    rcx = rp.uniform(-0.25 * w, 1.25 * w)
    wavelength = rp.uniform(6.0, 14.0) * scale
    radius = np.sqrt((yy - rcy) ** 2 + (xx - rcx) ** 2)
    phase = radius / wavelength + rp.uniform(0.0, 1.0)
    tri = np.abs(2.0 * (phase - np.floor(phase)) - 1.0)
    img += rp.uniform(0.05, 0.09) * (_smoothstep(tri) - 0.5)

    sh = rng.child("shape")
    grid = max(3, int(round(min(h, w) / 13.0)))
    cells = grid * grid
    lo = max(3, cells // 5)
    count = int(sh.child("count").integers(lo, cells + 1))
    base_r = max(1.8, sh.child("size").uniform(2.3, 4.0) * scale)
    base_amp = sh.child("amp").uniform(0.32, 0.48)
    feather = sh.child("feather").uniform(0.25, 0.55)
    # soft edges shave disc and bar area by different factors; this
    # ratio keeps the expected ink equal so brightness stays class-blind
    k2 = 2.0 * feather - feather * feather
    rebalance = (1.0 - 0.5 * k2) / (1.0 - 0.5 * feather) ** 2
    order = sh.child("cells").permutation(cells)[:count]
    if cls == 1:
        dir_y, dir_x = _unit_direction(sh.child("dir"))
        aspect = sh.child("aspect").uniform(1.8, 2.4)

    cell_h, cell_w = h / grid, w / grid
    jit = config.position_jitter
    field = np.zeros((h, w))
    for k, cell in enumerate(order):
        sk = sh.child(int(k))
        gy, gx = divmod(int(cell), grid)
        cy = (gy + 0.5) * cell_h + sk.uniform(-jit, jit) * cell_h
        cx = (gx + 0.5) * cell_w + sk.uniform(-jit, jit) * cell_w
        r = base_r * sk.uniform(0.85, 1.15)
        amp = base_amp * sk.uniform(0.85, 1.15)
        if cls == 0:
            mask = _disc_mask(yy, xx, cy, cx, r, feather)
        else:
            dy, dx = _jitter_direction(dir_y, dir_x,
                                       sk.uniform(-0.18, 0.18))
            half_len = aspect * r
            half_wid = rebalance * np.pi * r * r / (4.0 * half_len)
            if half_wid < 0.8:
                half_wid = 0.8
                half_len = rebalance * np.pi * r * r / (4.0 * half_wid)
            mask = _bar_mask(yy, xx, cy, cx, dy, dx, half_len, half_wid,
                             feather)
        # additive composite: expected ink is then independent of shape
        # geometry, so neither class ends up brighter
        field += amp * mask
    img += field

    if config.noise_sigma > 0:
        grain = rng.child("grain").uniform(0.7, 1.3)
        img += _irwin_hall_noise(rng.child("noise"), (h, w),
                                 grain * config.noise_sigma)
    return np.clip(img, 0.0, 1.0)


def _write_split(config, root, split, count, labeled):
    split_dir = os.path.join(root, split)
    os.makedirs(split_dir, exist_ok=True)
    stream = RngStream(config.seed, "synth", split)
    names = []
    classes = []
    for i in range(count):
        cls = i % 2  # alternating: balanced within one image per class
        img = render_image(config, cls, stream.child(i))
        name = f"{i:05d}.pgm"
        write_pgm(os.path.join(split_dir, name), quantize(img))
        names.append(name)
        classes.append(cls)
    manifest = os.path.join(split_dir, "manifest.csv")
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        if labeled:
            out.writerow(["path"] + [f"label_{i}" for i in
                                     range(len(config.class_names))])
            for name, cls in zip(names, classes):
                onehot = [1 if c == cls else 0
                          for c in range(len(config.class_names))]
                out.writerow([name] + onehot)
        else:
            out.writerow(["path"])
            for name in names:
                out.writerow([name])
    meta = {"image_size": list(config.image_size),
            "class_names": list(config.class_names) if labeled else [],
            "count": count, "labeled": labeled}
    with open(os.path.join(split_dir, "meta.json"), "w",
              encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return manifest


def synth_generate(config, out_root):
    """Write pretrain/train/test splits; returns their manifest paths."""
    os.makedirs(out_root, exist_ok=True)
    return {
        "pretrain": _write_split(config, out_root, "pretrain",
                                 config.num_unlabeled, labeled=False),
        "train": _write_split(config, out_root, "train",
                              config.num_labeled_train, labeled=True),
        "test": _write_split(config, out_root, "test",
                             config.num_labeled_test, labeled=True),
    }
