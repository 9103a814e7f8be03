"""Distillation of independent image mechanisms (shape, texture, background) into compact student GANs."""

from .core import (
    BEST_MASK_WEIGHT,
    GaussianMaskNoise,
    IMTriple,
    LabeledImageBatch,
    MaskOpacity,
    RandomMaskRotation,
    blend,
    compose,
    make_mask_transform,
    sample_latent,
)
from .counterfactual import CounterfactualSet, generate_counterfactuals
from .datasets import DatasetManifest, build_double_colored_mnist, load_batch, load_split
from .losses import LossWeights, discriminator_objective, generator_objective
from .nets import GeneratorSpec, DiscriminatorSpec, build_discriminator, build_generator, param_count, profile_specs
from .study import InvariantClassifier, StudyResult, run_shape_study, train_invariant_classifier
from .teachers import ProceduralTeacher, ReplayTeacher, TeacherDataset, generate_teacher_dataset, make_teacher
from .train import IMDistiller, TrainReport, distill_im, train_baseline
from .validation import CompositionError, TrainingDivergenceError

__version__ = "0.1.0"
