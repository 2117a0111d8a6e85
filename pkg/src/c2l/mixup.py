"""Batch-level and feature-level mixup sharing one mixing factor.

One :class:`MixSpec` (a mixing factor and a shuffle permutation) is drawn
per training iteration and reused for the batch mixup of BOTH augmented
views and for the teacher-side feature mixup.  That sharing is what makes
the mixed student view and the mixed teacher features homogeneous
counterparts of each other; independent draws would decouple them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import ImageBatch

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class MixSpec:
    lam: float  # mixing factor in [0,1]
    perm: np.ndarray  # permutation of 0..Z-1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0,1], got {self.lam}")
        p = np.asarray(self.perm)
        if sorted(p.tolist()) != list(range(len(p))):
            raise ValueError("perm is not a permutation of 0..Z-1")

    @property
    def z(self):
        return len(self.perm)


def sample_mixspec(z, rng):
    """Draw lambda ~ Beta(1,1) (= Uniform(0,1)) and a uniform permutation."""
    if z < 2:
        raise ValueError(f"mixup needs at least two samples, got Z={z}")
    lam = float(rng.uniform(0.0, 1.0))
    perm = rng.permutation(z)
    return MixSpec(lam=lam, perm=perm)


def batch_mixup(batch, spec):
    """out[j] = lam * in[j] + (1-lam) * in[perm[j]], elementwise."""
    imgs = batch.images
    if imgs.shape[0] != spec.z:
        raise ValueError(
            f"batch size {imgs.shape[0]} does not match MixSpec size {spec.z}")
    lam = imgs.dtype.type(spec.lam)
    mixed = lam * imgs + (1 - lam) * imgs[spec.perm]
    return ImageBatch(mixed)


def feature_mixup(features, spec, eps=_NORM_EPS):
    """Mix unit-norm feature rows by the same rule, then re-normalize.

    ``features`` is a plain Z x D array (teacher outputs carry no
    gradient).  A mixed row collapsing below ``eps`` is an error.
    """
    f = np.asarray(features)
    if f.ndim != 2:
        raise ValueError(f"features must be [Z,D], got shape {f.shape}")
    if f.shape[0] != spec.z:
        raise ValueError(
            f"feature count {f.shape[0]} does not match MixSpec size {spec.z}")
    lam = f.dtype.type(spec.lam)
    mixed = lam * f + (1 - lam) * f[spec.perm]
    norms = np.sqrt((mixed * mixed).sum(axis=1, keepdims=True))
    if (norms < eps).any():
        raise ValueError("mixed feature row collapsed to zero norm")
    return mixed / norms
