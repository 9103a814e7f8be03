"""Distillation objectives for the student generator and discriminator.

All functions are pure and differentiable (torch). Expectations are
arithmetic means over the batch; per-layer feature distances are means over
elements so the default layer weights are scale-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, asdict

import torch
import torch.nn.functional as F

from .validation import TrainingDivergenceError

PIXEL_NORMS = ("L1", "L2")
GAN_LOSSES = ("hinge", "hinge_literal", "bce")
FEATURE_DISTANCES = ("L1", "per_layer_kl")


@dataclass
class LossWeights:
    """Loss weights and variant switches.

    ``alpha`` of ``None`` means uniform weights ``1 / num_layers``, resolved
    against the discriminator by :meth:`resolve_alpha`.
    """

    lambda_pix: float = 1.0
    lambda_adv: float = 1.0
    alpha: list | None = None
    temperature: float = 1.0
    use_kl: bool = False
    pixel_norm: str = "L1"
    gan_loss: str = "hinge"
    feature_distance: str = "L1"
    kl_temperature_squared: bool = False

    def __post_init__(self):
        for name in ("lambda_pix", "lambda_adv"):
            v = getattr(self, name)
            if not v >= 0 or not math.isfinite(v):
                raise ValueError(f"{name} must be a finite non-negative number, got {v!r}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature!r}")
        if self.alpha is not None:
            self.alpha = [float(a) for a in self.alpha]
            if not self.alpha or any(not a >= 0 for a in self.alpha):
                raise ValueError("alpha must be a non-empty list of non-negative weights")
        if self.pixel_norm not in PIXEL_NORMS:
            raise ValueError(f"pixel_norm must be one of {PIXEL_NORMS}")
        if self.gan_loss not in GAN_LOSSES:
            raise ValueError(f"gan_loss must be one of {GAN_LOSSES}")
        if self.feature_distance not in FEATURE_DISTANCES:
            raise ValueError(f"feature_distance must be one of {FEATURE_DISTANCES}")

    def resolve_alpha(self, num_layers):
        if self.alpha is None:
            return [1.0 / num_layers] * num_layers
        if len(self.alpha) != num_layers:
            raise ValueError(f"alpha has {len(self.alpha)} entries but the discriminator has {num_layers} layers")
        return list(self.alpha)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**d)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def pixel_loss(teacher_out, student_out, norm="L1"):
    """Mean absolute (L1) or squared (L2) difference over all elements."""
    _check_same_shape(teacher_out, student_out, "pixel_loss")
    diff = teacher_out - student_out
    if norm == "L1":
        return diff.abs().mean()
    if norm == "L2":
        return diff.pow(2).mean()
    raise ValueError(f"norm must be one of {PIXEL_NORMS}, got {norm!r}")


def _check_scores(scores, what):
    if scores.numel() == 0:
        raise ValueError(f"{what}: empty score vector")
    return scores.reshape(-1)


def adv_gen_loss(disc_scores_student, mode="hinge"):
    """Generator adversarial loss on raw (pre-sigmoid) discriminator scores.

    ``hinge`` is ``-mean(D(S))``; ``bce`` is the non-saturating
    ``mean(-log sigmoid(D(S)))``. ``hinge_literal`` is accepted as an alias of
    ``hinge`` since both hinge variants share the generator term.
    """
    s = _check_scores(disc_scores_student, "adv_gen_loss")
    if mode in ("hinge", "hinge_literal"):
        return -s.mean()
    if mode == "bce":
        return F.softplus(-s).mean()
    raise ValueError(f"mode must be one of {GAN_LOSSES}, got {mode!r}")


def adv_disc_loss(disc_scores_teacher, disc_scores_student, mode="hinge"):
    """Discriminator loss with teacher outputs as the "real" side.

    ``hinge``: mean(relu(1 - D(T))) + mean(relu(1 + D(S))).
    ``hinge_literal``: -mean(relu(1 - D(T)) + relu(1 - D(S))), kept verbatim for
    fidelity experiments; it does not train a useful discriminator.
    ``bce``: mean(-log sigmoid(D(T))) + mean(-log(1 - sigmoid(D(S)))).
    """
    t = _check_scores(disc_scores_teacher, "adv_disc_loss")
    s = _check_scores(disc_scores_student, "adv_disc_loss")
    if t.shape != s.shape:
        raise ValueError(f"adv_disc_loss: length mismatch {t.numel()} vs {s.numel()}")
    if mode == "hinge":
        return F.relu(1.0 - t).mean() + F.relu(1.0 + s).mean()
    if mode == "hinge_literal":
        return -(F.relu(1.0 - t) + F.relu(1.0 - s)).mean()
    if mode == "bce":
        return F.softplus(-t).mean() + F.softplus(s).mean()
    raise ValueError(f"mode must be one of {GAN_LOSSES}, got {mode!r}")


def _flat_kl(teacher, student, temperature, temperature_squared=False):
    """Batch mean of KL(p_t || p_s) with p = softmax(flatten(x) / temperature)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature!r}")
    t = teacher.reshape(teacher.shape[0], -1) / temperature
    s = student.reshape(student.shape[0], -1) / temperature
    log_pt = F.log_softmax(t, dim=1)
    log_ps = F.log_softmax(s, dim=1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=1).mean()
    if temperature_squared:
        kl = kl * temperature**2
    return kl


def kl_loss(teacher_out, student_out, temperature=1.0, temperature_squared=False):
    """KL divergence between temperature softmaxes over each sample's pixels."""
    _check_same_shape(teacher_out, student_out, "kl_loss")
    return _flat_kl(teacher_out, student_out, temperature, temperature_squared)


def feature_loss(teacher_feats, student_feats, weights, distance="L1", temperature=1.0):
    """Weighted sum over discriminator layers of per-layer feature distances."""
    if not teacher_feats or len(teacher_feats) != len(student_feats):
        raise ValueError(
            f"feature stacks must be non-empty with equal layer counts, got {len(teacher_feats)} and {len(student_feats)}"
        )
    weights = list(weights)
    if len(weights) != len(teacher_feats):
        raise ValueError(f"{len(weights)} weights for {len(teacher_feats)} layers")
    total = teacher_feats[0].new_zeros(())
    for a, t, s in zip(weights, teacher_feats, student_feats):
        _check_same_shape(t, s, "feature_loss")
        if a == 0:
            continue
        if distance == "L1":
            d = (t - s).abs().mean()
        elif distance == "per_layer_kl":
            d = _flat_kl(t, s, temperature)
        else:
            raise ValueError(f"distance must be one of {FEATURE_DISTANCES}, got {distance!r}")
        total = total + a * d
    return total


def _check_finite(name, value):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        raise TrainingDivergenceError(name, v)


GENERATOR_PARTS = ("feature", "pixel", "adv_gen", "kl")


def generator_objective(parts, weights: LossWeights):
    """feature + lambda_pix * pixel + lambda_adv * adv_gen (+ kl when enabled).

    ``parts`` maps each of ``feature``, ``pixel``, ``adv_gen``, ``kl`` to a
    scalar (float or 0-d tensor). Non-finite parts raise
    :class:`TrainingDivergenceError` naming the term.
    """
    for name in GENERATOR_PARTS:
        if name not in parts:
            raise KeyError(f"missing generator objective part {name!r}")
        _check_finite(name, parts[name])
    total = parts["feature"] + weights.lambda_pix * parts["pixel"] + weights.lambda_adv * parts["adv_gen"]
    if weights.use_kl:
        total = total + parts["kl"]
    return total


def discriminator_objective(adv_disc):
    _check_finite("adv_disc", adv_disc)
    return adv_disc
