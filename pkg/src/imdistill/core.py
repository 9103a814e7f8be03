"""Domain types, the composition mechanism and shape-mask transformations.

Images live in [-1, 1] (channels first); masks live in [0, 1] with a
single channel. Every stochastic operation takes an explicit seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import (
    CompositionError,
    as_float_tensor,
    as_label_tensor,
    check_image_batch,
    check_mask_batch,
    check_positive,
    check_unit_weight,
)

DEFAULT_LATENT_DIM = 128
DEFAULT_TRUNCATION = 2.0
DEFAULT_NOISE_SIGMA = 0.1
DEFAULT_MAX_DEGREES = 30.0
BEST_MASK_WEIGHT = 0.75


@dataclass
class LabeledImageBatch:
    """Pixels of shape (N, C, H, W) with one class label per element."""

    pixels: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        self.pixels = as_float_tensor(self.pixels)
        self.labels = as_label_tensor(self.labels)
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must be (N, C, H, W), got {tuple(self.pixels.shape)}")
        if len(self.labels) != len(self.pixels):
            raise ValueError("one label per batch element is required")

    def __len__(self):
        return len(self.pixels)


@dataclass
class IMTriple:
    """The (mask, foreground, background) arguments of the composition."""

    mask: torch.Tensor
    foreground: LabeledImageBatch
    background: LabeledImageBatch

    def __post_init__(self):
        self.mask = as_float_tensor(self.mask)
        m, f, b = self.mask, self.foreground.pixels, self.background.pixels
        if m.dim() != 4 or m.shape[1] != 1:
            raise CompositionError(f"mask must be (N, 1, H, W), got {tuple(m.shape)}")
        if not (m.shape[0] == f.shape[0] == b.shape[0]):
            raise CompositionError(
                f"batch sizes differ: mask {m.shape[0]}, foreground {f.shape[0]}, background {b.shape[0]}"
            )
        if not (m.shape[2:] == f.shape[2:] == b.shape[2:]):
            raise CompositionError(
                f"spatial sizes differ: mask {tuple(m.shape[2:])}, foreground {tuple(f.shape[2:])}, "
                f"background {tuple(b.shape[2:])}"
            )
        if f.shape[1] != b.shape[1]:
            raise CompositionError("foreground and background must have the same channel count")


def sample_latent(count, latent_dim=DEFAULT_LATENT_DIM, truncation=DEFAULT_TRUNCATION, rng_seed=0):
    """Draw ``count`` truncated-normal latent codes as a (count, latent_dim) tensor.

    Each coordinate is a standard normal draw, redrawn until it falls inside
    [-truncation, truncation].
    """
    check_positive("count", count, integer=True)
    check_positive("latent_dim", latent_dim, integer=True)
    check_positive("truncation", truncation)
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((count, latent_dim))
    bad = np.abs(z) > truncation
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > truncation
    return torch.from_numpy(z.astype(np.float32))


def blend(mask, foreground, background, mask_weight=1.0):
    """(w*m) * f + (1 - w*m) * b with the mask broadcast over channels."""
    w = check_unit_weight("mask_weight", mask_weight)
    m = as_float_tensor(mask)
    f = as_float_tensor(foreground)
    b = as_float_tensor(background)
    if m.dim() != 4 or f.dim() != 4 or b.dim() != 4:
        raise CompositionError("mask, foreground and background must be 4-d batches")
    if m.shape[1] != 1 or m.shape[0] != f.shape[0] or f.shape != b.shape or m.shape[2:] != f.shape[2:]:
        raise CompositionError(
            f"incompatible shapes: mask {tuple(m.shape)}, foreground {tuple(f.shape)}, background {tuple(b.shape)}"
        )
    if w != 1.0:
        m = w * m
    return m * f + (1.0 - m) * b


def compose(triple: IMTriple, mask_weight=1.0) -> LabeledImageBatch:
    """Combine an :class:`IMTriple` into a composite image batch.

    Labels are copied from the foreground batch.
    """
    pixels = blend(triple.mask, triple.foreground.pixels, triple.background.pixels, mask_weight)
    return LabeledImageBatch(pixels, triple.foreground.labels.clone())


def mask_add_gaussian_noise(m, sigma=DEFAULT_NOISE_SIGMA, rng_seed=0):
    check_positive("sigma", sigma)
    m = check_mask_batch(m)
    gen = torch.Generator().manual_seed(int(rng_seed))
    noise = torch.randn(m.shape, generator=gen, dtype=torch.float32)
    return (m + sigma * noise).clamp_(0.0, 1.0)


def rotate_masks(m, angles_degrees):
    """Rotate each mask about its centre by the given angle (degrees, counter-clockwise).

    Bilinear resampling; pixels that come from outside the frame are 0.
    """
    m = check_mask_batch(m)
    angles = as_float_tensor(angles_degrees, dtype=torch.float64).reshape(-1)
    if len(angles) != len(m):
        raise ValueError("one angle per mask is required")
    theta = angles * (math.pi / 180.0)
    cos, sin = torch.cos(theta), torch.sin(theta)
    zeros = torch.zeros_like(cos)
    # grid_sample maps output coordinates to input coordinates, hence the inverse rotation
    affine = torch.stack(
        [torch.stack([cos, -sin, zeros], dim=1), torch.stack([sin, cos, zeros], dim=1)], dim=1
    ).to(torch.float32)
    grid = F.affine_grid(affine, list(m.shape), align_corners=False)
    out = F.grid_sample(m, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.clamp_(0.0, 1.0)


def mask_rotate(m, max_degrees=DEFAULT_MAX_DEGREES, rng_seed=0):
    """Rotate every mask by an angle drawn uniformly from [-max_degrees, max_degrees]."""
    check_positive("max_degrees", max_degrees)
    if max_degrees > 180:
        raise ValueError(f"max_degrees must be at most 180, got {max_degrees}")
    m = check_mask_batch(m)
    rng = np.random.default_rng(rng_seed)
    angles = rng.uniform(-max_degrees, max_degrees, size=len(m))
    return rotate_masks(m, angles)


def mask_scale_opacity(m, weight=BEST_MASK_WEIGHT):
    w = check_unit_weight("weight", weight)
    m = check_mask_batch(m)
    return m * w if w != 1.0 else m.clone()


class _MaskTransformer(TransformerMixin, BaseEstimator):
    """Stateless mask transformer; ``fit`` only validates parameters."""

    def fit(self, X, y=None):
        check_mask_batch(X)
        self._validate_params_()
        return self

    def _validate_params_(self):
        pass

    def _apply(self, m):
        raise NotImplementedError

    def transform(self, X):
        self._validate_params_()
        return self._apply(check_mask_batch(X)).numpy()


class GaussianMaskNoise(_MaskTransformer):
    """Add clamped Gaussian noise to shape masks.

    Parameters
    ----------
    sigma : float, default=0.1
        Standard deviation of the additive noise.
    random_state : int, default=0
        Seed of the noise draw.
    """

    def __init__(self, sigma=DEFAULT_NOISE_SIGMA, random_state=0):
        self.sigma = sigma
        self.random_state = random_state

    def _validate_params_(self):
        check_positive("sigma", self.sigma)

    def _apply(self, m):
        return mask_add_gaussian_noise(m, self.sigma, self.random_state)


class RandomMaskRotation(_MaskTransformer):
    """Rotate each mask by a uniform random angle in [-max_degrees, max_degrees]."""

    def __init__(self, max_degrees=DEFAULT_MAX_DEGREES, random_state=0):
        self.max_degrees = max_degrees
        self.random_state = random_state

    def _validate_params_(self):
        check_positive("max_degrees", self.max_degrees)
        if self.max_degrees > 180:
            raise ValueError("max_degrees must be at most 180")

    def _apply(self, m):
        return mask_rotate(m, self.max_degrees, self.random_state)


class MaskOpacity(_MaskTransformer):
    """Scale masks by a constant weight in (0, 1] (lower opacity)."""

    def __init__(self, weight=BEST_MASK_WEIGHT):
        self.weight = weight

    def _validate_params_(self):
        check_unit_weight("weight", self.weight)

    def _apply(self, m):
        return mask_scale_opacity(m, self.weight)


MASK_TRANSFORMS = {
    "noise": GaussianMaskNoise,
    "rotation": RandomMaskRotation,
    "transparency": MaskOpacity,
}


def make_mask_transform(name, **params):
    try:
        cls = MASK_TRANSFORMS[name]
    except KeyError:
        raise ValueError(f"unknown mask transform {name!r}; choose from {sorted(MASK_TRANSFORMS)}") from None
    return cls(**params)


def to_uint8(x, value_range=(-1.0, 1.0)):
    """Linear map to 0..255 with round-half-up."""
    lo, hi = value_range
    x = as_float_tensor(x, dtype=torch.float64)
    scaled = (x - lo) / (hi - lo) * 255.0
    return torch.floor(scaled + 0.5).clamp_(0, 255).to(torch.uint8)


def from_uint8(x, value_range=(-1.0, 1.0)):
    lo, hi = value_range
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(torch.float32)
    return x / 255.0 * (hi - lo) + lo


__all__ = [
    "LabeledImageBatch",
    "IMTriple",
    "sample_latent",
    "blend",
    "compose",
    "mask_add_gaussian_noise",
    "rotate_masks",
    "mask_rotate",
    "mask_scale_opacity",
    "GaussianMaskNoise",
    "RandomMaskRotation",
    "MaskOpacity",
    "make_mask_transform",
    "to_uint8",
    "from_uint8",
    "check_image_batch",
]
