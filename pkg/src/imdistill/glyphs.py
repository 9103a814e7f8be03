"""Stroke-based digit glyphs rendered as anti-aliased masks."""

from __future__ import annotations

import math

import numpy as np
import torch


def _arc(cx, cy, rx, ry, start, stop, n=16):
    t = np.radians(np.linspace(start, stop, n))
    return list(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


# unit-square polylines, y grows downwards; angles in degrees, -90 is the top
DIGIT_STROKES = {
    0: [_arc(0.5, 0.5, 0.21, 0.31, 0, 360, 28)],
    1: [[(0.38, 0.30), (0.52, 0.18), (0.52, 0.82)]],
    2: [_arc(0.5, 0.36, 0.19, 0.17, 190, 360, 12) + [(0.69, 0.38), (0.30, 0.82), (0.72, 0.82)]],
    3: [_arc(0.48, 0.34, 0.18, 0.15, 200, 450, 16), _arc(0.48, 0.65, 0.2, 0.17, -90, 160, 16)],
    4: [[(0.62, 0.82), (0.62, 0.18), (0.27, 0.62), (0.76, 0.62)]],
    5: [[(0.70, 0.18), (0.35, 0.18), (0.32, 0.46)] + _arc(0.49, 0.62, 0.2, 0.18, 220, 520, 18)],
    6: [[(0.64, 0.18), (0.42, 0.38), (0.32, 0.62)], _arc(0.5, 0.64, 0.18, 0.18, 0, 360, 22)],
    7: [[(0.27, 0.18), (0.73, 0.18), (0.42, 0.82)]],
    8: [_arc(0.5, 0.33, 0.15, 0.14, 0, 360, 20), _arc(0.5, 0.65, 0.18, 0.17, 0, 360, 22)],
    9: [_arc(0.5, 0.36, 0.17, 0.17, 0, 360, 22), [(0.67, 0.36), (0.60, 0.82)]],
}


def _random_strokes(label):
    rng = np.random.default_rng(10_007 + label)
    pts = rng.uniform(0.22, 0.78, size=(5, 2))
    return [list(map(tuple, pts))]


def glyph_segments(label):
    """(S, 4) array of segments (x0, y0, x1, y1) for a class."""
    strokes = DIGIT_STROKES.get(label % 10 if label < 10 else -1) or _random_strokes(label)
    segs = []
    for line in strokes:
        for (x0, y0), (x1, y1) in zip(line[:-1], line[1:]):
            segs.append((x0, y0, x1, y1))
    return np.asarray(segs, dtype=np.float64)


def _pixel_grid(size):
    c = (np.arange(size) + 0.5) / size
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _segment_distance(points, segs, chunk=256):
    """Distances (B, P) from warped points (B, P, 2) to the nearest segment."""
    a = torch.from_numpy(segs[:, :2]).float()
    ab = torch.from_numpy(segs[:, 2:]).float() - a
    denom = (ab * ab).sum(-1).clamp_min(1e-12)
    pts = torch.from_numpy(points).float()
    out = []
    for i in range(0, len(pts), chunk):
        p = pts[i : i + chunk, :, None, :] - a
        t = ((p * ab).sum(-1) / denom).clamp_(0.0, 1.0)
        diff = p - t[..., None] * ab
        out.append((diff * diff).sum(-1).min(dim=-1).values.sqrt_())
    return torch.cat(out).double().numpy()


def render_glyphs(labels, warps, size=28):
    """Render one mask per label with per-sample warp parameters.

    ``warps`` has shape (B, 8): rotation (rad), log-scale, shear, shift-x,
    shift-y, thickness (unit coords), bend amplitude, bend phase.
    Returns float64 array (B, size, size) in [0, 1].
    """
    labels = np.asarray(labels, dtype=np.int64)
    warps = np.asarray(warps, dtype=np.float64)
    grid = _pixel_grid(size) - 0.5
    out = np.zeros((len(labels), size * size))
    pixel = 1.0 / size
    for label in np.unique(labels):
        idx = np.nonzero(labels == label)[0]
        w = warps[idx]
        rot, log_s, shear, tx, ty, thick, bend, phase = w.T
        # inverse warp: output pixel -> template coordinates
        x = grid[None, :, 0] - tx[:, None]
        y = grid[None, :, 1] - ty[:, None]
        x = x - bend[:, None] * np.sin(2 * math.pi * (y + phase[:, None]))
        cos, sin = np.cos(-rot)[:, None], np.sin(-rot)[:, None]
        xr, yr = cos * x - sin * y, sin * x + cos * y
        s = np.exp(-log_s)[:, None]
        xr, yr = xr * s, yr * s
        xr = xr - shear[:, None] * yr
        pts = np.stack([xr + 0.5, yr + 0.5], axis=-1)
        d = _segment_distance(pts, glyph_segments(int(label)))
        out[idx] = np.clip((thick[:, None] - d) / pixel + 0.5, 0.0, 1.0)
    return out.reshape(len(labels), size, size)


def latent_warps(z, strength=1.0):
    """Map the first 8 latent coordinates to bounded warp parameters."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1] < 8:
        z = np.pad(z, ((0, 0), (0, 8 - z.shape[1])))
    t = np.tanh(z[:, :8])
    return np.stack(
        [
            strength * 0.20 * t[:, 0],
            strength * 0.10 * t[:, 1],
            strength * 0.15 * t[:, 2],
            strength * 0.04 * t[:, 3],
            strength * 0.04 * t[:, 4],
            0.065 * (1.0 + 0.25 * t[:, 5]),
            strength * 0.02 * t[:, 6],
            0.5 * t[:, 7],
        ],
        axis=1,
    )


def random_warps(count, rng, strength=1.6):
    """Handwriting-like variation for synthetic digit sources."""
    z = rng.standard_normal((count, 8))
    w = latent_warps(np.clip(z, -2.5, 2.5), strength=strength)
    w[:, 5] = rng.uniform(0.045, 0.09, size=count)
    return w
