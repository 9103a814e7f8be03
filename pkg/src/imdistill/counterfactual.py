"""Counterfactual inference: shared noise, per-mechanism labels, composition."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import DEFAULT_TRUNCATION, IMTriple, LabeledImageBatch, compose, sample_latent
from .imageio import IMAGE_DIR, image_name, write_labels_csv, write_png, write_text_atomic
from .teachers import CheckpointTeacher, Teacher
from .validation import CompositionError, check_unit_weight

LABEL_MODES = ("independent", "shared")


@dataclass
class CounterfactualSet:
    images: LabeledImageBatch
    triple: IMTriple
    shape_labels: torch.Tensor
    texture_labels: torch.Tensor
    background_labels: torch.Tensor
    latents: torch.Tensor

    def __len__(self):
        return len(self.images)


def _as_source(src):
    if isinstance(src, Teacher):
        return src
    if isinstance(src, (str, Path)):
        return CheckpointTeacher(src)
    raise TypeError(f"expected a teacher or a checkpoint path, got {type(src).__name__}")


def check_compatible(shape, texture, background):
    if shape.output != "mask":
        raise CompositionError("the shape mechanism must produce masks")
    if texture.output != "rgb" or background.output != "rgb":
        raise CompositionError("texture and background mechanisms must produce rgb images")
    sizes = {m.image_size for m in (shape, texture, background)}
    dims = {m.latent_dim for m in (shape, texture, background)}
    if len(sizes) > 1:
        raise CompositionError(f"mechanisms disagree on image size: {sorted(sizes)}")
    if len(dims) > 1:
        raise CompositionError(f"mechanisms disagree on latent size: {sorted(dims)}")


def draw_labels(count, num_classes, label_mode, rng):
    if label_mode == "independent":
        return tuple(torch.from_numpy(rng.integers(0, num_classes, size=count)) for _ in range(3))
    if label_mode == "shared":
        y = torch.from_numpy(rng.integers(0, num_classes, size=count))
        return y, y.clone(), y.clone()
    raise ValueError(f"label_mode must be one of {LABEL_MODES}, got {label_mode!r}")


def generate_counterfactuals(
    shape,
    texture,
    background,
    count,
    seed=0,
    mask_weight=1.0,
    label_mode="independent",
    truncation=DEFAULT_TRUNCATION,
    labels=None,
    mask_transform=None,
    batch_size=1000,
):
    """Sample one noise vector per image, labels per mechanism, and compose.

    ``shape``/``texture``/``background`` are teachers or generator checkpoint
    paths. ``labels`` optionally fixes the (shape, texture, background) label
    tensors. ``mask_transform`` maps a mask batch to a mask batch and is
    applied before composition.
    """
    mask_weight = check_unit_weight("mask_weight", mask_weight)
    shape, texture, background = (_as_source(s) for s in (shape, texture, background))
    check_compatible(shape, texture, background)
    num_classes = min(shape.num_classes, texture.num_classes, background.num_classes)
    u = sample_latent(count, shape.latent_dim, truncation, seed)
    if labels is None:
        rng = np.random.default_rng([seed, 1])
        ys, yt, yb = draw_labels(count, num_classes, label_mode, rng)
    else:
        ys, yt, yb = (torch.as_tensor(v).long() for v in labels)
    masks, fgs, bgs = [], [], []
    for i in range(0, count, batch_size):
        sl = slice(i, i + batch_size)
        masks.append(shape.query(u[sl], ys[sl]))
        fgs.append(texture.query(u[sl], yt[sl]))
        bgs.append(background.query(u[sl], yb[sl]))
    m = torch.cat(masks)
    if mask_transform is not None:
        m = mask_transform(m)
    triple = IMTriple(m, LabeledImageBatch(torch.cat(fgs), yt), LabeledImageBatch(torch.cat(bgs), yb))
    images = compose(triple, mask_weight)
    return CounterfactualSet(images, triple, ys, yt, yb, u)


def save_counterfactuals(cf: CounterfactualSet, out_dir, write_triple=True):
    """Composites under ``images/``; masks, textures, backgrounds alongside."""
    out = Path(out_dir)
    (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(cf.images.pixels):
        write_png(out / IMAGE_DIR / image_name(i), img)
    if write_triple:
        for name, batch, vr in (
            ("masks", cf.triple.mask, (0.0, 1.0)),
            ("foregrounds", cf.triple.foreground.pixels, (-1.0, 1.0)),
            ("backgrounds", cf.triple.background.pixels, (-1.0, 1.0)),
        ):
            (out / name).mkdir(exist_ok=True)
            for i, img in enumerate(batch):
                write_png(out / name / image_name(i), img, vr)
    write_labels_csv(out / "labels.csv", cf.images.labels.tolist())
    rows = ["index,shape,texture,background"] + [
        f"{i},{int(a)},{int(b)},{int(c)}"
        for i, (a, b, c) in enumerate(zip(cf.shape_labels, cf.texture_labels, cf.background_labels))
    ]
    write_text_atomic(out / "mechanism_labels.csv", "\n".join(rows) + "\n")
    return out
