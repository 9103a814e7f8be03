"""Student generator, projection discriminator and invariant classifier.

The generator is a ResNet with class-conditional batch norm and depthwise
separable convolutions. The discriminator is a stack of spectrally normalised
strided convolutions with a projection class term. Parameter counts are
available from the specs without building a model.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .validation import as_label_tensor

SUPPORTED_SIZES = {28: 7, 256: 4}


class BuildError(ValueError):
    """Raised for inconsistent network specs."""


@dataclass(frozen=True)
class GeneratorSpec:
    latent_dim: int = 128
    num_classes: int = 10
    base_channels: int = 12
    num_residual_blocks: int = 2
    output_size: int = 28
    output_channels: int = 3
    max_channel_mult: int = 16

    def validate(self):
        for name in ("latent_dim", "num_classes", "base_channels", "num_residual_blocks", "max_channel_mult"):
            if getattr(self, name) < 1:
                raise BuildError(f"{name} must be >= 1")
        if self.output_size not in SUPPORTED_SIZES:
            raise BuildError(f"output_size must be one of {sorted(SUPPORTED_SIZES)}")
        if self.output_channels not in (1, 3):
            raise BuildError("output_channels must be 1 (mask mode) or 3 (rgb)")
        start = SUPPORTED_SIZES[self.output_size]
        if start * 2**self.num_residual_blocks != self.output_size:
            raise BuildError(
                f"{self.num_residual_blocks} upsampling blocks from a {start}x{start} grid "
                f"cannot reach {self.output_size}x{self.output_size}"
            )
        return self

    @property
    def mask_mode(self):
        return self.output_channels == 1

    @property
    def initial_size(self):
        return SUPPORTED_SIZES[self.output_size]

    def channels(self):
        n = self.num_residual_blocks
        return [self.base_channels * min(2 ** (n - i), self.max_channel_mult) for i in range(n + 1)]

    def param_count(self):
        self.validate()
        k, ch, s0 = self.num_classes, self.channels(), self.initial_size
        total = (self.latent_dim + 1) * ch[0] * s0 * s0
        for c_in, c_out in zip(ch[:-1], ch[1:]):
            total += 2 * k * c_in + 2 * k * c_out  # class-conditional scale/shift tables
            total += _dwsep_params(c_in, c_out) + _dwsep_params(c_out, c_out)
            if c_in != c_out:
                total += c_in * c_out + c_out
        total += 2 * ch[-1]  # final batch-norm affine
        total += 9 * ch[-1] * self.output_channels + self.output_channels
        return total

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    num_classes: int = 10
    base_channels: int = 32
    num_layers: int = 3
    input_size: int = 28
    input_channels: int = 3
    max_channel_mult: int = 8

    def layer_plan(self):
        """(in_ch, out_ch, kernel, stride, padding, out_size) for every conv layer."""
        plan, size, c_in = [], self.input_size, self.input_channels
        for i in range(self.num_layers):
            c_out = self.base_channels * min(2**i, self.max_channel_mult)
            if i > 0 and size // 2 >= 4:
                plan.append((c_in, c_out, 4, 2, 1, size // 2))
                size //= 2
            else:
                plan.append((c_in, c_out, 3, 1, 1, size))
            c_in = c_out
        return plan

    def validate(self):
        for name in ("num_classes", "base_channels", "num_layers", "input_channels", "max_channel_mult"):
            if getattr(self, name) < 1:
                raise BuildError(f"{name} must be >= 1")
        if self.input_size not in SUPPORTED_SIZES:
            raise BuildError(f"input_size must be one of {sorted(SUPPORTED_SIZES)}")
        return self

    def feature_shapes(self, batch=1):
        return [(batch, c_out, s, s) for (_, c_out, _, _, _, s) in self.layer_plan()]

    def param_count(self):
        self.validate()
        plan = self.layer_plan()
        total = sum(c_in * c_out * k * k + c_out for (c_in, c_out, k, _, _, _) in plan)
        c_last = plan[-1][1]
        return total + c_last + 1 + self.num_classes * c_last

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ClassifierSpec:
    input_size: int = 28
    num_outputs: int = 2
    base_channels: int = 16
    input_channels: int = 3

    def validate(self):
        if self.num_outputs < 2:
            raise BuildError("num_outputs must be >= 2")
        if self.base_channels < 1 or self.input_size < 4 or self.input_channels < 1:
            raise BuildError("invalid classifier spec")
        return self

    def to_dict(self):
        return asdict(self)


def _dwsep_params(c_in, c_out):
    return 9 * c_in + c_in * c_out + c_out


PROFILES = {
    "mnist28": dict(
        generator=dict(latent_dim=128, base_channels=12, num_residual_blocks=2, output_size=28),
        discriminator=dict(base_channels=16, num_layers=3, input_size=28),
        num_classes=10,
    ),
    "imagenet256": dict(
        generator=dict(latent_dim=128, base_channels=24, num_residual_blocks=6, output_size=256),
        discriminator=dict(base_channels=32, num_layers=6, input_size=256),
        num_classes=1000,
    ),
}


def profile_specs(profile, mask_mode=False, num_classes=None):
    """Generator and discriminator specs of a named size profile."""
    try:
        p = PROFILES[profile]
    except KeyError:
        raise BuildError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}") from None
    k = num_classes or p["num_classes"]
    ch = 1 if mask_mode else 3
    g = GeneratorSpec(num_classes=k, output_channels=ch, **p["generator"]).validate()
    d = DiscriminatorSpec(num_classes=k, input_channels=ch, **p["discriminator"]).validate()
    return g, d


class DepthwiseSeparableConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, padding=1):
        super().__init__()
        self.depthwise = nn.Conv2d(
            in_channels, in_channels, kernel_size, padding=padding, groups=in_channels, bias=False
        )
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class ConditionalBatchNorm2d(nn.Module):
    """Batch norm whose scale and shift are looked up per class."""

    def __init__(self, num_features, num_classes):
        super().__init__()
        self.bn = nn.BatchNorm2d(num_features, affine=False)
        self.gain = nn.Embedding(num_classes, num_features)
        self.bias = nn.Embedding(num_classes, num_features)
        nn.init.ones_(self.gain.weight)
        nn.init.zeros_(self.bias.weight)

    def forward(self, x, y):
        out = self.bn(x)
        return out * self.gain(y)[:, :, None, None] + self.bias(y)[:, :, None, None]


class GeneratorBlock(nn.Module):
    def __init__(self, in_channels, out_channels, num_classes):
        super().__init__()
        self.bn1 = ConditionalBatchNorm2d(in_channels, num_classes)
        self.conv1 = DepthwiseSeparableConv2d(in_channels, out_channels)
        self.bn2 = ConditionalBatchNorm2d(out_channels, num_classes)
        self.conv2 = DepthwiseSeparableConv2d(out_channels, out_channels)
        self.shortcut = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else None

    def forward(self, x, y):
        h = F.relu(self.bn1(x, y))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h, y)))
        skip = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.shortcut is not None:
            skip = self.shortcut(skip)
        return h + skip


class StudentGenerator(nn.Module):
    """Maps (latent batch, label batch) to images in [-1, 1] or masks in [0, 1]."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        ch = spec.channels()
        s0 = spec.initial_size
        self.linear = nn.Linear(spec.latent_dim, ch[0] * s0 * s0)
        self.blocks = nn.ModuleList(
            GeneratorBlock(c_in, c_out, spec.num_classes) for c_in, c_out in zip(ch[:-1], ch[1:])
        )
        self.bn_out = nn.BatchNorm2d(ch[-1])
        self.conv_out = nn.Conv2d(ch[-1], spec.output_channels, 3, padding=1)

    def forward(self, z, y):
        y = y.long()
        s0 = self.spec.initial_size
        h = self.linear(z).view(z.shape[0], -1, s0, s0)
        for block in self.blocks:
            h = block(h, y)
        h = self.conv_out(F.relu(self.bn_out(h)))
        return torch.sigmoid(h) if self.spec.mask_mode else torch.tanh(h)


class ProjectionDiscriminator(nn.Module):
    """Returns raw scores and the list of per-layer activations."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.convs = nn.ModuleList(
            spectral_norm(nn.Conv2d(c_in, c_out, k, stride=s, padding=p))
            for (c_in, c_out, k, s, p, _) in spec.layer_plan()
        )
        c_last = spec.layer_plan()[-1][1]
        self.linear = spectral_norm(nn.Linear(c_last, 1))
        self.embed = spectral_norm(nn.Embedding(spec.num_classes, c_last))

    @property
    def num_layers(self):
        return len(self.convs)

    def forward(self, x, y):
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.1)
            feats.append(h)
        pooled = h.sum(dim=(2, 3))
        score = self.linear(pooled).squeeze(1) + self.projection(pooled, y)
        return score, feats

    def projection(self, pooled, y):
        return (self.embed(y.long()) * pooled).sum(dim=1)


class InvariantClassifierNet(nn.Module):
    """Three strided convolutions, global average pooling and a linear head."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        c = spec.base_channels
        self.features = nn.Sequential(
            nn.Conv2d(spec.input_channels, c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.head = nn.Linear(4 * c, spec.num_outputs)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


def build_generator(spec: GeneratorSpec) -> StudentGenerator:
    return StudentGenerator(spec)


def build_discriminator(spec: DiscriminatorSpec) -> ProjectionDiscriminator:
    return ProjectionDiscriminator(spec)


def build_classifier(spec: ClassifierSpec) -> InvariantClassifierNet:
    return InvariantClassifierNet(spec)


def param_count(spec):
    """Exact trainable-parameter count of the model a spec builds."""
    if isinstance(spec, nn.Module):
        return sum(p.numel() for p in spec.parameters() if p.requires_grad)
    return spec.param_count()


def generate(generator, z, y, batch_size=256):
    """Run ``generator`` in eval mode without gradients, in chunks."""
    y = as_label_tensor(y, generator.spec.num_classes)
    was_training = generator.training
    generator.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(z), batch_size):
            outs.append(generator(z[i : i + batch_size], y[i : i + batch_size]))
    generator.train(was_training)
    return torch.cat(outs) if outs else torch.empty(0)
