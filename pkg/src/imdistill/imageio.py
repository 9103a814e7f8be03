"""PNG and raw-blob IO for image batches and latent tables."""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import from_uint8, to_uint8

IMAGE_DIR = "images"


def image_name(index):
    return f"{index:07d}.png"


def write_png(path, pixels, value_range=(-1.0, 1.0)):
    """Write one (C, H, W) image with C in {1, 3} as an 8-bit PNG."""
    arr = to_uint8(pixels, value_range).numpy()
    if arr.shape[0] == 1:
        img = Image.fromarray(arr[0], mode="L")
    else:
        img = Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)), mode="RGB")
    img.save(path, format="PNG", compress_level=6)


def read_png(path, value_range=(-1.0, 1.0)):
    with Image.open(path) as img:
        arr = np.array(img)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return from_uint8(torch.from_numpy(np.ascontiguousarray(arr)), value_range)


def write_latents(path, z):
    np.ascontiguousarray(np.asarray(z, dtype="<f4")).tofile(path)


def read_latents(path, latent_dim):
    blob = np.fromfile(path, dtype="<f4")
    if blob.size % latent_dim:
        raise ValueError(f"{path}: {blob.size} floats is not a multiple of latent_dim={latent_dim}")
    return torch.from_numpy(blob.astype(np.float32).reshape(-1, latent_dim))


def write_labels_csv(path, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label"])
        for i, y in enumerate(labels):
            w.writerow([i, int(y)])


def read_labels_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for i, row in enumerate(rows):
        if int(row["index"]) != i:
            raise ValueError(f"{path}: row {i} has index {row['index']}")
    return torch.tensor([int(r["label"]) for r in rows], dtype=torch.long)


def write_text_atomic(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def contact_sheet(rows, path, pad=2):
    """Save a grid PNG; ``rows`` is a list of (N, C, H, W) batches, one per row.

    Single-channel rows are masks in [0, 1]; three-channel rows are images in [-1, 1].
    """
    rows = [torch.as_tensor(r) for r in rows]
    n = max(len(r) for r in rows)
    _, _, h, w = rows[0].shape
    sheet = np.full((len(rows) * (h + pad) + pad, n * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i, batch in enumerate(rows):
        mask_row = batch.shape[1] == 1
        arr = to_uint8(batch, (0.0, 1.0) if mask_row else (-1.0, 1.0)).numpy()
        if mask_row:
            arr = np.repeat(arr, 3, axis=1)
        for j, img in enumerate(arr):
            y0, x0 = pad + i * (h + pad), pad + j * (w + pad)
            sheet[y0 : y0 + h, x0 : x0 + w] = img.transpose(1, 2, 0)
    Image.fromarray(sheet, mode="RGB").save(path, format="PNG")
