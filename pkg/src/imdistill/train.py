"""Per-mechanism distillation of a black-box teacher into a student GAN."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import save_checkpoint
from .config import DistillConfig
from .losses import (
    LossWeights,
    adv_disc_loss,
    adv_gen_loss,
    discriminator_objective,
    feature_loss,
    generator_objective,
    kl_loss,
    pixel_loss,
)
from .nets import build_discriminator, build_generator, generate, profile_specs
from .teachers import CheckpointTeacher, ReplayTeacher, TeacherDataset, generate_teacher_dataset, make_teacher
from .validation import as_float_tensor, as_label_tensor, check_image_batch

log = logging.getLogger(__name__)

# Faster-converging settings for CPU-scale runs (mnist28, a few thousand pairs):
# a larger step and a weaker adversarial term let the pixel and feature terms
# dominate early training.
DESK_RECIPE = dict(learning_rate=1e-3, lambda_adv=0.1)

METRIC_COLUMNS = ("epoch", "pixel", "feature", "adv_g", "adv_d", "kl", "total_g", "seconds")


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: Path | None = None
    discriminator_checkpoint: Path | None = None

    def column(self, name):
        return [r[name] for r in self.rows]

    @property
    def columns(self):
        return METRIC_COLUMNS


class _CsvLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def append(self, row):
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[c] for c in METRIC_COLUMNS])


def read_metrics(path):
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)
        ]


class IMDistiller(BaseEstimator):
    """Student generator distilled from a teacher's (z, y) -> output pairs.

    ``fit(Z, y, T)`` trains on latents ``Z``, labels ``y`` and teacher outputs
    ``T`` (images in [-1, 1], or masks in [0, 1] for ``im="shape"``).
    Discriminator steps use teacher outputs as the real side; the generator
    minimises the feature, pixel, adversarial and optional KL objective.

    Fitted attributes: ``generator_``, ``discriminator_``, ``report_``.
    """

    def __init__(
        self,
        im="texture",
        profile="mnist28",
        num_classes=None,
        lambda_pix=1.0,
        lambda_adv=1.0,
        alpha=None,
        temperature=1.0,
        use_kl=False,
        pixel_norm="L1",
        gan_loss="hinge",
        feature_distance="L1",
        kl_temperature_squared=False,
        learning_rate=2e-4,
        beta1=0.0,
        beta2=0.999,
        batch_size=64,
        epochs=20,
        disc_steps_per_gen_step=2,
        random_state=0,
    ):
        self.im = im
        self.profile = profile
        self.num_classes = num_classes
        self.lambda_pix = lambda_pix
        self.lambda_adv = lambda_adv
        self.alpha = alpha
        self.temperature = temperature
        self.use_kl = use_kl
        self.pixel_norm = pixel_norm
        self.gan_loss = gan_loss
        self.feature_distance = feature_distance
        self.kl_temperature_squared = kl_temperature_squared
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.epochs = epochs
        self.disc_steps_per_gen_step = disc_steps_per_gen_step
        self.random_state = random_state

    @classmethod
    def from_config(cls, config: DistillConfig, num_classes=None):
        w, o = config.weights, config.optimizer
        return cls(
            im=config.im,
            profile=config.profile,
            num_classes=num_classes,
            lambda_pix=w.lambda_pix,
            lambda_adv=w.lambda_adv,
            alpha=w.alpha,
            temperature=w.temperature,
            use_kl=w.use_kl,
            pixel_norm=w.pixel_norm,
            gan_loss=w.gan_loss,
            feature_distance=w.feature_distance,
            kl_temperature_squared=w.kl_temperature_squared,
            learning_rate=o.learning_rate,
            beta1=o.beta1,
            beta2=o.beta2,
            batch_size=config.batch_size,
            epochs=config.epochs,
            disc_steps_per_gen_step=config.disc_steps_per_gen_step,
            random_state=config.seed,
        )

    def loss_weights(self):
        return LossWeights(
            lambda_pix=self.lambda_pix,
            lambda_adv=self.lambda_adv,
            alpha=self.alpha,
            temperature=self.temperature,
            use_kl=self.use_kl,
            pixel_norm=self.pixel_norm,
            gan_loss=self.gan_loss,
            feature_distance=self.feature_distance,
            kl_temperature_squared=self.kl_temperature_squared,
        )

    @property
    def mask_mode(self):
        return self.im == "shape"

    def _check_inputs(self, Z, y, T=None):
        Z = as_float_tensor(Z)
        if Z.dim() != 2:
            raise ValueError(f"latents must be 2-d (N, latent_dim), got {tuple(Z.shape)}")
        y = as_label_tensor(y)
        if len(y) != len(Z):
            raise ValueError(f"{len(Z)} latents but {len(y)} labels")
        if T is None:
            return Z, y, None
        if self.mask_mode:
            T = check_image_batch(T, channels=1, value_range=(0.0, 1.0))
        else:
            T = check_image_batch(T, channels=3)
        if len(T) != len(Z):
            raise ValueError(f"{len(Z)} latents but {len(T)} teacher outputs")
        return Z, y, T

    def _build(self, num_classes, latent_dim):
        g_spec, d_spec = profile_specs(self.profile, mask_mode=self.mask_mode, num_classes=num_classes)
        if g_spec.latent_dim != latent_dim:
            g_spec = replace(g_spec, latent_dim=latent_dim).validate()
        torch.manual_seed(self.random_state)
        self.generator_ = build_generator(g_spec)
        self.discriminator_ = build_discriminator(d_spec)

    def fit(self, Z, y, T, checkpoint_dir=None, checkpoint_every=0, metrics_path=None):
        Z, y, T = self._check_inputs(Z, y, T)
        if self.im not in ("shape", "texture", "background"):
            raise ValueError(f"im must be shape, texture or background, got {self.im!r}")
        weights = self.loss_weights()
        num_classes = self.num_classes or int(y.max()) + 1
        self._build(num_classes, Z.shape[1])
        G, D = self.generator_, self.discriminator_
        alpha = weights.resolve_alpha(D.num_layers)
        opt_g = torch.optim.Adam(G.parameters(), lr=self.learning_rate, betas=(float(self.beta1), float(self.beta2)))
        opt_d = torch.optim.Adam(D.parameters(), lr=self.learning_rate, betas=(float(self.beta1), float(self.beta2)))
        shuffle = torch.Generator().manual_seed(self.random_state)
        metrics = _CsvLog(metrics_path)
        report = TrainReport()
        start = time.perf_counter()
        n = len(Z)
        G.train()
        D.train()
        for epoch in range(1, self.epochs + 1):
            t0 = time.perf_counter()
            sums = dict.fromkeys(("pixel", "feature", "adv_g", "kl", "total_g"), 0.0)
            adv_d_sum, g_steps, d_steps = 0.0, 0, 0
            order = torch.randperm(n, generator=shuffle)
            for i in range(0, n, self.batch_size):
                idx = order[i : i + self.batch_size]
                if len(idx) < 2:
                    continue
                z, yb, t = Z[idx], y[idx], T[idx]
                for _ in range(self.disc_steps_per_gen_step):
                    with torch.no_grad():
                        s = G(z, yb)
                    scores, _ = D(torch.cat([t, s]), torch.cat([yb, yb]))
                    loss_d = discriminator_objective(
                        adv_disc_loss(scores[: len(t)], scores[len(t) :], weights.gan_loss)
                    )
                    opt_d.zero_grad(set_to_none=True)
                    loss_d.backward()
                    opt_d.step()
                    adv_d_sum += float(loss_d.detach())
                    d_steps += 1
                s = G(z, yb)
                scores, feats = D(torch.cat([t, s]), torch.cat([yb, yb]))
                feats_t = [f[: len(t)].detach() for f in feats]
                feats_s = [f[len(t) :] for f in feats]
                parts = {
                    "feature": feature_loss(feats_t, feats_s, alpha, weights.feature_distance, weights.temperature),
                    "pixel": pixel_loss(t, s, weights.pixel_norm),
                    "adv_gen": adv_gen_loss(scores[len(t) :], weights.gan_loss),
                    "kl": kl_loss(t, s, weights.temperature, weights.kl_temperature_squared),
                }
                total = generator_objective(parts, weights)
                opt_g.zero_grad(set_to_none=True)
                total.backward()
                opt_g.step()
                for key, name in (("pixel", "pixel"), ("feature", "feature"), ("adv_g", "adv_gen"), ("kl", "kl")):
                    sums[key] += float(parts[name].detach())
                sums["total_g"] += float(total.detach())
                g_steps += 1
            row = {"epoch": epoch, **{k: v / max(g_steps, 1) for k, v in sums.items()}}
            row["adv_d"] = adv_d_sum / max(d_steps, 1)
            row["seconds"] = time.perf_counter() - t0
            report.rows.append(row)
            metrics.append(row)
            log.info("epoch %d pixel=%.4f feature=%.4f adv_g=%.4f adv_d=%.4f", epoch, row["pixel"],
                     row["feature"], row["adv_g"], row["adv_d"])
            if checkpoint_dir and checkpoint_every and epoch % checkpoint_every == 0 and epoch != self.epochs:
                save_checkpoint(G, Path(checkpoint_dir) / f"generator_epoch{epoch:04d}", extra={"epoch": epoch})
        report.wall_clock = time.perf_counter() - start
        G.eval()
        D.eval()
        if checkpoint_dir:
            report.checkpoint = save_checkpoint(
                G, Path(checkpoint_dir) / "generator", extra={"epoch": self.epochs, "im": self.im}
            )
            report.discriminator_checkpoint = save_checkpoint(D, Path(checkpoint_dir) / "discriminator")
        self.report_ = report
        return self

    def _check_fitted(self):
        if not hasattr(self, "generator_"):
            raise NotFittedError("IMDistiller is not fitted yet")

    def generate(self, Z, y):
        """Student outputs as a float tensor (eval mode, no gradients)."""
        self._check_fitted()
        Z, y, _ = self._check_inputs(Z, y)
        return generate(self.generator_, Z, y)

    def predict(self, Z, y):
        return self.generate(Z, y).numpy()

    def score(self, Z, y, T):
        """Negative mean absolute error against teacher outputs (higher is better)."""
        Z, y, T = self._check_inputs(Z, y, T)
        return -float((self.generate(Z, y) - T).abs().mean())


def heldout_l1(generator_or_estimator, Z, y, T):
    """Mean per-pixel L1 between a student and stored teacher outputs."""
    if isinstance(generator_or_estimator, IMDistiller):
        out = generator_or_estimator.generate(Z, y)
    else:
        out = generate(generator_or_estimator, as_float_tensor(Z), y)
    return float((out - as_float_tensor(T)).abs().mean())


def _resolve_dataset(config: DistillConfig, out_dir: Path):
    if config.dataset:
        return TeacherDataset(config.dataset)
    tc = config.teacher
    teacher = make_teacher(tc.kind, mechanism=tc.mechanism, source=tc.source, seed=tc.seed,
                           **_profile_geometry(config.profile))
    return generate_teacher_dataset(teacher, config.per_class, seed=config.seed, out_dir=out_dir / "teacher_data")


def _profile_geometry(profile):
    g, _ = profile_specs(profile)
    return {"num_classes": g.num_classes, "image_size": g.output_size, "latent_dim": g.latent_dim}


def distill_im(config: DistillConfig, out_dir=None):
    """Distill one mechanism from replayed (z, y, teacher output) triples.

    Writes ``metrics.csv``, checkpoints and the resolved ``config.ini`` under
    ``out_dir`` when given. Returns the fitted estimator's :class:`TrainReport`.
    """
    from .config import save_config

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        save_config(config, out / "config.ini")
    if config.dataset is None and out is None:
        raise ValueError("a teacher dataset path or an output directory is required")
    dataset = _resolve_dataset(config, out) if out else TeacherDataset(config.dataset)
    expected = "mask" if config.mask_mode else "rgb"
    if dataset.output != expected:
        raise ValueError(f"{config.im} distillation needs a {expected} teacher, dataset holds {dataset.output}")
    Z, y, T = dataset.arrays()
    est = IMDistiller.from_config(config, num_classes=dataset.num_classes)
    est.fit(
        Z, y, T,
        checkpoint_dir=out / "checkpoints" if out else None,
        checkpoint_every=config.checkpoint_every,
        metrics_path=out / "metrics.csv" if out else None,
    )
    report = est.report_
    report.estimator = est
    return report


BASELINE_WEIGHTS = dict(lambda_pix=0.0, use_kl=False)


def baseline_config(config: DistillConfig) -> DistillConfig:
    """Adversarial-only variant of ``config``: no pixel, feature or KL terms."""
    cfg = config.with_weights(**BASELINE_WEIGHTS)
    _, d_spec = profile_specs(config.profile)
    cfg = cfg.with_weights(alpha=[0.0] * d_spec.num_layers)
    return replace(cfg, mode="baseline")


def train_baseline(config: DistillConfig, out_dir=None):
    return distill_im(baseline_config(config), out_dir)
