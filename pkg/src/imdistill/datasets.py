"""Double-colored MNIST construction and dataset IO.

``build_double_colored_mnist`` turns a standard MNIST IDX source into::

    out_dir/
      train/images/NNNNNNN.png  train/labels.csv  train/fg_bg.csv
      test/images/NNNNNNN.png   test/labels.csv   test/fg_bg.csv
      manifest                  # written last; marks a complete build
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import LabeledImageBatch, blend
from .glyphs import random_warps, render_glyphs
from .imageio import IMAGE_DIR, image_name, read_labels_csv, read_png, write_labels_csv, write_png, write_text_atomic

FORMAT_VERSION = 1
SPLITS = ("train", "test")
MIN_COLOR_DISTANCE = 0.3

# Two disjoint 12-colour palettes on the {0, .5, 1}^3 lattice: any foreground and
# background colour differ by at least 0.5 in some channel, so independent draws
# never violate the minimum distance.
FG_PALETTE = np.array(
    [
        [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 0.5, 0.0], [0.5, 0.0, 1.0],
        [1.0, 1.0, 1.0], [0.5, 1.0, 0.0], [1.0, 0.5, 0.5], [0.0, 0.5, 1.0],
    ]
)
BG_PALETTE = np.array(
    [
        [0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0],
        [0.0, 0.0, 0.5], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5],
        [1.0, 1.0, 0.5], [0.5, 1.0, 1.0], [1.0, 0.5, 1.0], [0.5, 0.5, 1.0],
    ]
)

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IngestionError(IOError):
    """Missing or corrupt MNIST source files."""


class DatasetError(IOError):
    """Incomplete or inconsistent dataset directory."""


# -- IDX -------------------------------------------------------------------


def _open_maybe_gz(path):
    path = Path(path)
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise IngestionError(f"missing MNIST file {path} (or {gz.name})")


def read_idx(path):
    with _open_maybe_gz(path) as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] != 0x08:
        raise IngestionError(f"{path}: not an unsigned-byte IDX file")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IngestionError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", data[4:header])
    expected = int(np.prod(shape, dtype=np.int64))
    if len(data) - header != expected:
        raise IngestionError(f"{path}: expected {expected} bytes of data, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(shape)


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def read_mnist_idx(source_dir, split):
    img_name, lbl_name = IDX_FILES[split]
    images = read_idx(Path(source_dir) / img_name)
    labels = read_idx(Path(source_dir) / lbl_name)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise IngestionError(f"{source_dir}: inconsistent {split} images {images.shape} / labels {labels.shape}")
    if labels.size and labels.max() > 9:
        raise IngestionError(f"{source_dir}: {split} labels outside 0..9")
    return images, labels


def write_synthetic_mnist(out_dir, n_train=60000, n_test=10000, seed=0, size=28):
    """Write an MNIST-shaped IDX source of rendered stroke digits.

    Stands in for the real MNIST files when they are not available locally.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split, n in (("train", n_train), ("test", n_test)):
        labels = rng.integers(0, 10, size=n).astype(np.uint8)
        images = np.empty((n, size, size), dtype=np.uint8)
        for i in range(0, n, 2000):
            lab = labels[i : i + 2000]
            masks = render_glyphs(lab, random_warps(len(lab), rng), size=size)
            images[i : i + 2000] = np.floor(masks * 255.0 + 0.5).astype(np.uint8)
        img_name, lbl_name = IDX_FILES[split]
        write_idx(out / img_name, images)
        write_idx(out / lbl_name, labels)
    return out


# -- manifest --------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    counts: dict
    seed: int
    scale: float = 1.0
    colorization: dict = field(default_factory=dict)
    source: str = ""
    format_version: int = FORMAT_VERSION

    def split_size(self, split):
        return sum(self.counts[split].values())

    def split_dir(self, split):
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        return Path(self.root) / split

    def to_text(self):
        body = {
            "format_version": self.format_version,
            "seed": self.seed,
            "scale": self.scale,
            "source": self.source,
            "colorization": self.colorization,
            "counts": {s: {str(k): v for k, v in sorted(c.items())} for s, c in self.counts.items()},
        }
        return "".join(f"{k} = {json.dumps(v, sort_keys=True)}\n" for k, v in body.items())

    def save(self):
        write_text_atomic(Path(self.root) / "manifest", self.to_text())

    @classmethod
    def load(cls, root):
        root = Path(root)
        mf = root / "manifest"
        if not mf.exists():
            raise DatasetError(f"{root}: no manifest; the dataset build is incomplete")
        d = {}
        for line in mf.read_text().splitlines():
            if line.strip():
                k, _, v = line.partition(" = ")
                d[k] = json.loads(v)
        counts = {s: {int(k): v for k, v in c.items()} for s, c in d["counts"].items()}
        return cls(
            root=root,
            counts=counts,
            seed=d["seed"],
            scale=d["scale"],
            colorization=d["colorization"],
            source=d["source"],
            format_version=d["format_version"],
        )


# -- construction ----------------------------------------------------------


def _stratified_subset(labels, scale, rng):
    if scale >= 1.0:
        return np.arange(len(labels))
    keep = []
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        n = max(1, int(round(scale * len(idx))))
        keep.append(rng.choice(idx, size=n, replace=False))
    return np.sort(np.concatenate(keep))


def draw_colors(count, rng, fg_palette=FG_PALETTE, bg_palette=BG_PALETTE):
    """Independent palette indices for foreground and background.

    Pairs closer than ``MIN_COLOR_DISTANCE`` in every channel are redrawn.
    """
    fg = rng.integers(0, len(fg_palette), size=count)
    bg = rng.integers(0, len(bg_palette), size=count)
    while True:
        bad = np.abs(fg_palette[fg] - bg_palette[bg]).max(axis=1) < MIN_COLOR_DISTANCE
        if not bad.any():
            return fg, bg
        fg[bad] = rng.integers(0, len(fg_palette), size=int(bad.sum()))
        bg[bad] = rng.integers(0, len(bg_palette), size=int(bad.sum()))


def colorize(gray, fg_colors, bg_colors):
    """gray (N, H, W) uint8 -> images (N, 3, H, W) in [-1, 1].

    The grayscale digit is scaled linearly to a [0, 1] mask (no threshold).
    """
    m = torch.from_numpy(np.asarray(gray, dtype=np.float32) / 255.0)[:, None]
    f = torch.from_numpy(np.asarray(fg_colors, dtype=np.float32))[:, :, None, None].expand(-1, -1, *m.shape[2:])
    b = torch.from_numpy(np.asarray(bg_colors, dtype=np.float32))[:, :, None, None].expand(-1, -1, *m.shape[2:])
    return blend(m, f * 2 - 1, b * 2 - 1)


def build_double_colored_mnist(source_mnist, seed, out_dir, scale=1.0, source_label=None):
    """Colour MNIST digits and backgrounds independently; returns the manifest.

    ``source_label`` replaces the source path recorded in the manifest.
    """
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must lie in (0, 1], got {scale!r}")
    out = Path(out_dir)
    splits = {s: read_mnist_idx(source_mnist, s) for s in SPLITS}
    seeds = np.random.SeedSequence(seed).spawn(len(SPLITS))
    counts = {}
    for split, ss in zip(SPLITS, seeds):
        images, labels = splits[split]
        rng = np.random.default_rng(ss)
        keep = _stratified_subset(labels, scale, rng)
        images, labels = images[keep], labels[keep]
        fg, bg = draw_colors(len(labels), rng)
        split_dir = out / split
        (split_dir / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
        chunk = 4096
        for i in range(0, len(labels), chunk):
            pix = colorize(images[i : i + chunk], FG_PALETTE[fg[i : i + chunk]], BG_PALETTE[bg[i : i + chunk]])
            for j, img in enumerate(pix):
                write_png(split_dir / IMAGE_DIR / image_name(i + j), img)
        write_labels_csv(split_dir / "labels.csv", labels)
        with open(split_dir / "fg_bg.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "fg_index", "bg_index", "fg_r", "fg_g", "fg_b", "bg_r", "bg_g", "bg_b"])
            for i, (a, b) in enumerate(zip(fg, bg)):
                w.writerow([i, int(a), int(b), *FG_PALETTE[a].tolist(), *BG_PALETTE[b].tolist()])
        counts[split] = {int(c): int((labels == c).sum()) for c in range(10)}
    manifest = DatasetManifest(
        root=out,
        counts=counts,
        seed=seed,
        scale=scale,
        colorization={
            "law": "independent uniform palette draws",
            "fg_palette": FG_PALETTE.tolist(),
            "bg_palette": BG_PALETTE.tolist(),
            "min_distance": MIN_COLOR_DISTANCE,
            "mask": "linear grayscale / 255",
        },
        source=source_label or str(source_mnist),
    )
    manifest.save()
    return manifest


# -- reading ---------------------------------------------------------------


def _as_manifest(manifest):
    return manifest if isinstance(manifest, DatasetManifest) else DatasetManifest.load(manifest)


def read_color_log(manifest, split):
    manifest = _as_manifest(manifest)
    with open(manifest.split_dir(split) / "fg_bg.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (
        np.array([int(r["fg_index"]) for r in rows]),
        np.array([int(r["bg_index"]) for r in rows]),
    )


def load_batch(manifest, split, indices):
    """Decode the requested records (order preserved) as a labelled batch."""
    manifest = _as_manifest(manifest)
    n = manifest.split_size(split)
    indices = [int(i) for i in indices]
    for i in indices:
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for {split} split of size {n}")
    d = manifest.split_dir(split)
    labels = read_labels_csv(d / "labels.csv")
    if indices:
        pixels = torch.stack([read_png(d / IMAGE_DIR / image_name(i)) for i in indices])
    else:
        pixels = torch.empty(0, 3, 28, 28)
    return LabeledImageBatch(pixels, labels[indices] if indices else labels[:0])


def load_split(manifest, split, limit=None):
    manifest = _as_manifest(manifest)
    n = manifest.split_size(split)
    if limit is not None:
        n = min(n, limit)
    return load_batch(manifest, split, range(n))
