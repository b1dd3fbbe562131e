"""Fairness retrofitting for frozen segmentors via adversarial latent perturbation."""

from .data import AttributeSpec, Sample, SegDataset, bin_attribute, load_dataset, split_dataset
from .metrics import FairnessReport, UtilityVector, aggregate_runs, dice, fairness, subgroup_utilities
from .perturbation import (
    AppleHyperparams,
    AttributeDiscriminator,
    PerturbationGenerator,
    PerturberBundle,
    loss_discriminator,
    loss_fair,
    loss_generator,
    loss_seg,
    perturb,
)
from .segmentors import LatentEmbedding, SplitSegmentor, build_reference_segmentor, freeze
from .synth import SynthConfig, generate
from .training import (
    TrainConfig,
    attribute_probe,
    predict_apple,
    train_apple,
    train_baseline,
    train_resampled,
    train_subgroup_models,
)

__version__ = "0.1.0"
