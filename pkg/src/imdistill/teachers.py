"""Black-box teachers: anything answering (z, y) -> image or mask.

Three kinds are provided. Procedural teachers render deterministic synthetic
mechanisms so the pipeline runs without external weights; replay teachers
serve a stored dataset of (latent, label, image) triples by exact key;
checkpoint teachers run a stored generator.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .core import DEFAULT_LATENT_DIM, DEFAULT_TRUNCATION, sample_latent
from .datasets import BG_PALETTE, FG_PALETTE
from .glyphs import latent_warps, render_glyphs
from .imageio import (
    IMAGE_DIR,
    image_name,
    read_labels_csv,
    read_latents,
    read_png,
    write_labels_csv,
    write_latents,
    write_png,
    write_text_atomic,
)
from .nets import generate
from .validation import as_float_tensor, as_label_tensor

MECHANISMS = ("shape", "texture", "background")
FORMAT_VERSION = 1


class ReplayMissError(KeyError):
    """A replay teacher was queried with a (z, y) pair it does not store."""


class Teacher:
    kind = "abstract"

    def __init__(self, num_classes, output, image_size, latent_dim):
        if output not in ("mask", "rgb"):
            raise ValueError("output must be 'mask' or 'rgb'")
        self.num_classes = int(num_classes)
        self.output = output
        self.image_size = int(image_size)
        self.latent_dim = int(latent_dim)

    @property
    def channels(self):
        return 1 if self.output == "mask" else 3

    @property
    def value_range(self):
        return (0.0, 1.0) if self.output == "mask" else (-1.0, 1.0)

    def query(self, z, y):
        z = as_float_tensor(z)
        y = as_label_tensor(y, self.num_classes)
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"latents must be (N, {self.latent_dim}), got {tuple(z.shape)}")
        if len(z) != len(y):
            raise ValueError(f"{len(z)} latents but {len(y)} labels")
        return self._query(z, y)

    __call__ = query

    def _query(self, z, y):
        raise NotImplementedError

    def describe(self):
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "output": self.output,
            "image_size": self.image_size,
            "latent_dim": self.latent_dim,
        }


def _class_colors(palette, num_classes, seed):
    if num_classes <= len(palette):
        return palette[:num_classes].copy()
    rng = np.random.default_rng(seed)
    extra = rng.uniform(0.0, 1.0, size=(num_classes - len(palette), 3))
    return np.concatenate([palette, extra])


def _unit_grid(size):
    c = (np.arange(size) + 0.5) / size
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return xs, ys


class ProceduralTeacher(Teacher):
    kind = "procedural"

    def __init__(self, mechanism, num_classes=10, image_size=28, latent_dim=DEFAULT_LATENT_DIM, seed=0):
        if mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        super().__init__(num_classes, "mask" if mechanism == "shape" else "rgb", image_size, latent_dim)
        self.mechanism = mechanism
        self.seed = int(seed)
        self._fg = _class_colors(FG_PALETTE[:10], self.num_classes, self.seed)
        self._bg = _class_colors(BG_PALETTE[:10], self.num_classes, self.seed + 1)
        self._bg2 = _class_colors(np.roll(BG_PALETTE, -3, axis=0)[:10], self.num_classes, self.seed + 2)

    def describe(self):
        return {**super().describe(), "mechanism": self.mechanism, "seed": self.seed}

    def _query(self, z, y):
        zn = z.double().numpy()
        yn = y.numpy()
        if self.mechanism == "shape":
            out = render_glyphs(yn, latent_warps(zn), self.image_size)[:, None]
        elif self.mechanism == "texture":
            out = self._texture(zn, yn)
        else:
            out = self._background(zn, yn)
        return torch.from_numpy(out.astype(np.float32))

    def _texture(self, z, y):
        """Class colour, a z-driven tint and a low-frequency brightness field."""
        xs, ys = _unit_grid(self.image_size)
        t = np.tanh(z)
        base = self._fg[y]
        tint = 0.2 * t[:, 8:11]
        field = np.zeros((len(z),) + xs.shape)
        for k, (fx, fy) in enumerate(((1.0, 0.0), (0.0, 1.0), (1.0, 1.0))):
            amp = 0.15 * t[:, 11 + k]
            phase = math.pi * t[:, 14 + k]
            field += amp[:, None, None] * np.cos(
                2 * math.pi * (fx * xs + fy * ys)[None] + phase[:, None, None]
            )
        rgb = base[:, :, None, None] + tint[:, :, None, None] + field[:, None]
        return np.clip(rgb, 0.0, 1.0) * 2.0 - 1.0

    def _background(self, z, y):
        """Two-tone gradient whose direction and offset follow z."""
        xs, ys = _unit_grid(self.image_size)
        t = np.tanh(z)
        angle = 2 * math.pi * y / max(self.num_classes, 1) + 0.6 * t[:, 20]
        offset = 0.2 * t[:, 21]
        proj = (
            np.cos(angle)[:, None, None] * (xs - 0.5)[None]
            + np.sin(angle)[:, None, None] * (ys - 0.5)[None]
            - offset[:, None, None]
        )
        s = 1.0 / (1.0 + np.exp(-6.0 * proj))
        a, b = self._bg[y], self._bg2[y]
        rgb = a[:, :, None, None] * (1 - s[:, None]) + b[:, :, None, None] * s[:, None]
        return np.clip(rgb, 0.0, 1.0) * 2.0 - 1.0


class CheckpointTeacher(Teacher):
    kind = "checkpoint"

    def __init__(self, path):
        self.path = Path(path)
        self.generator, self.extra = load_checkpoint(self.path)
        spec = self.generator.spec
        super().__init__(
            spec.num_classes, "mask" if spec.mask_mode else "rgb", spec.output_size, spec.latent_dim
        )

    def describe(self):
        return {**super().describe(), "source": str(self.path)}

    def _query(self, z, y):
        return generate(self.generator, z, y)


class TeacherDataset:
    """Stored (latent, label, image) triples written by :func:`generate_teacher_dataset`.

    Layout: ``latents.bin`` (little-endian float32 rows), ``labels.csv``,
    ``images/NNNNNNN.png`` and a ``manifest`` written last.
    """

    def __init__(self, root):
        self.root = Path(root)
        mf = self.root / "manifest"
        if not mf.exists():
            raise FileNotFoundError(f"{self.root}: no manifest; teacher dataset is incomplete")
        self.header, self.rows = _read_dataset_manifest(mf)
        self.latent_dim = int(self.header["latent_dim"])
        self.num_classes = int(self.header["num_classes"])
        self.output = self.header["output"]
        self.image_size = int(self.header["image_size"])

    def __len__(self):
        return len(self.rows)

    @property
    def value_range(self):
        return (0.0, 1.0) if self.output == "mask" else (-1.0, 1.0)

    def latents(self):
        return read_latents(self.root / "latents.bin", self.latent_dim)

    def labels(self):
        return read_labels_csv(self.root / "labels.csv")

    def images(self, indices=None):
        idx = range(len(self)) if indices is None else indices
        files = [self.rows[i][2] for i in idx]
        if not files:
            return torch.empty(0, 1 if self.output == "mask" else 3, self.image_size, self.image_size)
        return torch.stack([read_png(self.root / f, self.value_range) for f in files])

    def arrays(self):
        return self.latents(), self.labels(), self.images()

    def class_counts(self):
        counts = {}
        for _, label, _ in self.rows:
            counts[label] = counts.get(label, 0) + 1
        return counts

    def validate(self):
        z, y = self.latents(), self.labels()
        if len(z) != len(self) or len(y) != len(self):
            raise ValueError("latents / labels / manifest row counts disagree")
        for i, (idx, label, f) in enumerate(self.rows):
            if idx != i or int(y[i]) != label or not (self.root / f).exists():
                raise ValueError(f"record {i} is inconsistent")
        expected = self.header.get("per_class")
        if expected is not None and any(v != expected for v in self.class_counts().values()):
            raise ValueError("per-class counts do not match the manifest")
        return self


def _read_dataset_manifest(path):
    import json

    header, rows, table = {}, [], False
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line == "index,label,image":
            table = True
        elif table:
            i, label, f = line.split(",")
            rows.append((int(i), int(label), f))
        else:
            k, _, v = line.partition(" = ")
            header[k] = json.loads(v)
    return header, rows


class ReplayTeacher(Teacher):
    """Serves stored images for exactly matching (latent, label) keys."""

    kind = "replay"

    def __init__(self, dataset):
        self.dataset = dataset if isinstance(dataset, TeacherDataset) else TeacherDataset(dataset)
        d = self.dataset
        super().__init__(d.num_classes, d.output, d.image_size, d.latent_dim)
        z, y = d.latents(), d.labels()
        self._index = {(row.numpy().tobytes(), int(label)): i for i, (row, label) in enumerate(zip(z, y))}
        self._cache = {}

    def describe(self):
        return {**super().describe(), "source": str(self.dataset.root)}

    def _query(self, z, y):
        out = []
        for row, label in zip(z, y):
            key = (row.contiguous().numpy().tobytes(), int(label))
            i = self._index.get(key)
            if i is None:
                raise ReplayMissError(f"no stored record for label {int(label)} and the given latent")
            if i not in self._cache:
                self._cache[i] = self.dataset.images([i])[0]
            out.append(self._cache[i])
        return torch.stack(out) if out else torch.empty(0, self.channels, self.image_size, self.image_size)


def generate_teacher_dataset(
    teacher, per_class, classes=None, latent_dim=None, truncation=DEFAULT_TRUNCATION, seed=0, out_dir=".",
    batch_size=500,
):
    """Query ``teacher`` on seeded truncated-normal latents, ``per_class`` per class.

    Records are ordered by class. The manifest is written last, so its absence
    marks a partial dataset.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    classes = teacher.num_classes if classes is None else classes
    latent_dim = teacher.latent_dim if latent_dim is None else latent_dim
    if latent_dim != teacher.latent_dim:
        raise ValueError(f"teacher expects latent_dim={teacher.latent_dim}, got {latent_dim}")
    if classes > teacher.num_classes:
        raise ValueError(f"teacher has only {teacher.num_classes} classes")
    out = Path(out_dir)
    try:
        (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
        stale = out / "manifest"
        if stale.exists():
            stale.unlink()
        n = per_class * classes
        z = sample_latent(n, latent_dim, truncation, seed)
        y = torch.arange(classes).repeat_interleave(per_class)
        write_latents(out / "latents.bin", z.numpy())
        write_labels_csv(out / "labels.csv", y.tolist())
        for c in range(classes):
            for start in range(c * per_class, (c + 1) * per_class, batch_size):
                stop = min(start + batch_size, (c + 1) * per_class)
                imgs = teacher.query(z[start:stop], y[start:stop])
                for j, img in enumerate(imgs):
                    write_png(out / IMAGE_DIR / image_name(start + j), img, teacher.value_range)
        import json

        header = {
            "format_version": FORMAT_VERSION,
            "teacher": teacher.describe(),
            "num_classes": classes,
            "output": teacher.output,
            "image_size": teacher.image_size,
            "latent_dim": latent_dim,
            "truncation": truncation,
            "seed": seed,
            "per_class": per_class,
            "count": n,
        }
        lines = [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in header.items()]
        lines.append("index,label,image")
        lines += [f"{i},{int(y[i])},{IMAGE_DIR}/{image_name(i)}" for i in range(n)]
        write_text_atomic(out / "manifest", "\n".join(lines) + "\n")
    except OSError as exc:
        raise IOError(f"failed to write teacher dataset to {out}: {exc}") from exc
    return TeacherDataset(out)


def make_teacher(kind, mechanism=None, source=None, num_classes=10, image_size=28, latent_dim=DEFAULT_LATENT_DIM, seed=0):
    """Build a teacher from a kind name: ``procedural``, ``replay`` or ``checkpoint``."""
    if kind == "procedural":
        return ProceduralTeacher(mechanism, num_classes, image_size, latent_dim, seed)
    if kind == "replay":
        return ReplayTeacher(source)
    if kind == "checkpoint":
        return CheckpointTeacher(source)
    raise ValueError(f"unknown teacher kind {kind!r}")
