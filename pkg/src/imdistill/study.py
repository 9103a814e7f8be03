"""Invariant classifier and the shape-mask transformation study."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import unique_labels

from .core import LabeledImageBatch, make_mask_transform
from .counterfactual import generate_counterfactuals
from .datasets import DatasetManifest, load_split
from .nets import ClassifierSpec, build_classifier
from .teachers import TeacherDataset
from .validation import as_float_tensor, check_image_batch

TRANSFORMS = ("noise", "rotation", "transparency")
STUDY_TASKS = ("digit", "real_vs_generated")
MAX_IMBALANCE = 0.6


@dataclass
class StudyResult:
    transform: str
    train_accuracy: float
    test_accuracy: float
    transform_params: dict = field(default_factory=dict)
    task: str = "real_vs_generated"
    seed: int = 0

    def __post_init__(self):
        for name in ("train_accuracy", "test_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must be a percentage, got {v}")

    def as_row(self):
        d = asdict(self)
        d["transform_params"] = ";".join(f"{k}={v}" for k, v in sorted(self.transform_params.items()))
        return d


RESULT_COLUMNS = ("transform", "train_accuracy", "test_accuracy", "transform_params", "task", "seed")


def append_results_csv(path, results):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        if new:
            w.writeheader()
        for r in results:
            w.writerow(r.as_row())


class InvariantClassifier(ClassifierMixin, BaseEstimator):
    """Small convolutional classifier over (N, 3, H, W) images in [-1, 1].

    Parameters
    ----------
    base_channels : int, default=16
        Width of the first convolution; later layers double it.
    epochs : int, default=5
    batch_size : int, default=32
    learning_rate : float, default=1e-3
    random_state : int, default=0
    """

    def __init__(self, base_channels=16, epochs=5, batch_size=32, learning_rate=1e-3, random_state=0):
        self.base_channels = base_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X = check_image_batch(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        targets = torch.from_numpy(np.searchsorted(self.classes_, y)).long()
        torch.manual_seed(self.random_state)
        spec = ClassifierSpec(
            input_size=X.shape[-1],
            num_outputs=len(self.classes_),
            base_channels=self.base_channels,
            input_channels=X.shape[1],
        )
        self.net_ = build_classifier(spec)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        gen = torch.Generator().manual_seed(self.random_state)
        self.net_.train()
        for _ in range(self.epochs):
            order = torch.randperm(len(X), generator=gen)
            for i in range(0, len(X), self.batch_size):
                idx = order[i : i + self.batch_size]
                loss = F.cross_entropy(self.net_(X[idx]), targets[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        self.net_.eval()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        if not hasattr(self, "net_"):
            raise NotFittedError("InvariantClassifier is not fitted yet")
        X = check_image_batch(X)
        with torch.no_grad():
            return torch.cat([self.net_(X[i : i + 1024]) for i in range(0, len(X), 1024)]).numpy()

    def predict_proba(self, X):
        return torch.softmax(torch.from_numpy(self.decision_function(X)), dim=1).numpy()

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


def _images_of(source, limit=None, split="train"):
    if isinstance(source, LabeledImageBatch):
        pix = source.pixels
    elif isinstance(source, DatasetManifest):
        pix = load_split(source, split, limit).pixels
    elif isinstance(source, TeacherDataset):
        pix = source.images(range(min(len(source), limit or len(source))))
    elif isinstance(source, (str, Path)):
        p = Path(source)
        if (p / "train").is_dir():
            pix = load_split(DatasetManifest.load(p), split, limit).pixels
        else:
            pix = TeacherDataset(p).images()
    else:
        pix = as_float_tensor(source)
    return pix if limit is None else pix[:limit]


def _percent(clf, X, y):
    return 100.0 * float(clf.score(X, y))


def train_invariant_classifier(real, generated, epochs=5, seed=0, test_fraction=0.2, limit=None, **clf_params):
    """Train a real (0) vs generated (1) classifier; accuracies on a stratified split."""
    xr = check_image_batch(_images_of(real, limit))
    xg = check_image_batch(_images_of(generated, limit))
    if len(xr) == 0 or len(xg) == 0:
        raise ValueError("both real and generated sources must be non-empty")
    share = len(xr) / (len(xr) + len(xg))
    if not 1 - MAX_IMBALANCE <= share <= MAX_IMBALANCE:
        raise ValueError(f"real/generated imbalance {share:.2f}/{1 - share:.2f} exceeds 60/40")
    X = torch.cat([xr, xg])
    y = np.concatenate([np.zeros(len(xr), dtype=np.int64), np.ones(len(xg), dtype=np.int64)])
    idx_train, idx_test = train_test_split(
        np.arange(len(X)), test_size=test_fraction, stratify=y, random_state=seed
    )
    clf = InvariantClassifier(epochs=epochs, random_state=seed, **clf_params)
    clf.fit(X[idx_train], y[idx_train])
    return StudyResult(
        transform="none",
        train_accuracy=_percent(clf, X[idx_train], y[idx_train]),
        test_accuracy=_percent(clf, X[idx_test], y[idx_test]),
        task="real_vs_generated",
        seed=seed,
    )


def _transform_for(name, params, seed):
    if name not in TRANSFORMS:
        raise ValueError(f"transform must be one of {TRANSFORMS}, got {name!r}")
    params = dict(params or {})
    if name == "noise":
        t = make_mask_transform("noise", sigma=params.get("sigma", 0.1), random_state=seed)
    elif name == "rotation":
        t = make_mask_transform("rotation", max_degrees=params.get("max_degrees", 30.0), random_state=seed)
    else:
        t = make_mask_transform("transparency", weight=params.get("weight", 0.75))
    t._validate_params_()
    resolved = {k: v for k, v in t.get_params().items() if k != "random_state"}
    return (lambda m: torch.from_numpy(t.transform(m))), resolved


def run_shape_study(
    transform,
    params=None,
    base=None,
    dataset=None,
    seed=0,
    n_generated=10000,
    n_real=10000,
    epochs=5,
    task="digit",
    **clf_params,
):
    """Tune the shape masks, generate counterfactuals, train the invariant classifier.

    ``base`` maps ``shape``/``texture``/``background`` to teachers or
    generator checkpoints. With ``task="digit"`` the classifier learns the
    shape label from counterfactuals and is tested on the real test split of
    ``dataset``; with ``task="real_vs_generated"`` it separates real training
    images from counterfactuals on a held-out split.
    """
    if task not in STUDY_TASKS:
        raise ValueError(f"task must be one of {STUDY_TASKS}")
    if base is None or dataset is None:
        raise ValueError("base mechanisms and a real dataset are required")
    dataset = dataset if isinstance(dataset, DatasetManifest) else DatasetManifest.load(dataset)
    fn, resolved = _transform_for(transform, params, seed)
    cf = generate_counterfactuals(
        base["shape"], base["texture"], base["background"], n_generated, seed=seed, mask_transform=fn
    )
    if task == "real_vs_generated":
        res = train_invariant_classifier(dataset, cf.images, epochs=epochs, seed=seed, limit=n_real, **clf_params)
        res.transform, res.transform_params = transform, resolved
        return res
    clf = InvariantClassifier(epochs=epochs, random_state=seed, **clf_params)
    y_cf = cf.shape_labels.numpy()
    clf.fit(cf.images.pixels, y_cf)
    test = load_split(dataset, "test", n_real)
    return StudyResult(
        transform=transform,
        train_accuracy=_percent(clf, cf.images.pixels, y_cf),
        test_accuracy=_percent(clf, test.pixels, test.labels.numpy()),
        transform_params=resolved,
        task=task,
        seed=seed,
    )
