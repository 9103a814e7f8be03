"""Input validation helpers shared by the estimators and pure operations."""

from __future__ import annotations

import numbers

import numpy as np
import torch


class CompositionError(ValueError):
    """Raised when mask, foreground and background cannot be combined."""


class TrainingDivergenceError(RuntimeError):
    """Raised when a loss term becomes NaN or infinite."""

    def __init__(self, term, value):
        super().__init__(f"loss term {term!r} diverged (value={value})")
        self.term = term
        self.value = value


def as_float_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def as_label_tensor(y, num_classes=None):
    y = torch.as_tensor(np.asarray(y) if not isinstance(y, torch.Tensor) else y)
    if y.dim() != 1:
        raise ValueError(f"labels must be a 1-d sequence, got shape {tuple(y.shape)}")
    if y.dtype.is_floating_point:
        if not torch.equal(y, y.round()):
            raise ValueError("labels must be integers")
    y = y.long()
    if y.numel() and int(y.min()) < 0:
        raise ValueError("labels must be non-negative")
    if num_classes is not None and y.numel() and int(y.max()) >= num_classes:
        raise ValueError(f"label {int(y.max())} out of range for {num_classes} classes")
    return y


def check_positive(name, value, *, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind) or not value > 0:
        raise ValueError(f"{name} must be a positive {'integer' if integer else 'number'}, got {value!r}")
    return value


def check_unit_weight(name, value):
    """Validate a weight in the half-open interval (0, 1]."""
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not 0.0 < value <= 1.0:
        raise ValueError(f"{name} must lie in (0, 1], got {value!r}")
    return float(value)


def check_image_batch(x, *, channels=None, value_range=(-1.0, 1.0), atol=1e-6):
    """Return ``x`` as a float tensor of shape (batch, channels, h, w).

    Pixel values must respect ``value_range`` up to ``atol``.
    """
    x = as_float_tensor(x)
    if x.dim() != 4:
        raise ValueError(f"expected a 4-d batch (N, C, H, W), got shape {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {x.shape[1]}")
    if value_range is not None and x.numel():
        lo, hi = value_range
        if not torch.isfinite(x).all():
            raise ValueError("batch contains non-finite values")
        if float(x.min()) < lo - atol or float(x.max()) > hi + atol:
            raise ValueError(f"values outside [{lo}, {hi}]: min={float(x.min())}, max={float(x.max())}")
    return x


def check_mask_batch(m):
    return check_image_batch(m, channels=1, value_range=(0.0, 1.0))


def check_same_length(**arrays):
    sizes = {k: len(v) for k, v in arrays.items()}
    if len(set(sizes.values())) > 1:
        raise ValueError(f"length mismatch: {sizes}")
