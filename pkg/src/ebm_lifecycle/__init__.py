"""Energy-based models trained and sampled under three Langevin trajectory regimes on toy densities."""
from .autodiff import DenseNet, Layer, NumericOverflowError, ShapeError, backward, finite_diff_check, forward
from .banks import DualBank, PairedBank, PersistentBank
from .defense import AttackConfig, Classifier, DefenseConfig, evaluate_defense, purify
from .energy import CompositeEnergy, DoubleWellEnergy, GaussianMixtureEnergy, MlpEnergy, QuadraticEnergy
from .generator import Generator
from .langevin import LangevinConfig, langevin_run, langevin_step
from .rng import Stream
from .toydata import frozen_generator_fixture, load_dataset
from .trainer import TrainConfig, ml_gradient, train_longrun, train_midrun, train_shortrun

__all__ = [
    "DenseNet", "Layer", "NumericOverflowError", "ShapeError", "backward", "finite_diff_check", "forward",
    "DualBank", "PairedBank", "PersistentBank",
    "AttackConfig", "Classifier", "DefenseConfig", "evaluate_defense", "purify",
    "CompositeEnergy", "DoubleWellEnergy", "GaussianMixtureEnergy", "MlpEnergy", "QuadraticEnergy",
    "Generator", "LangevinConfig", "langevin_run", "langevin_step", "Stream",
    "frozen_generator_fixture", "load_dataset",
    "TrainConfig", "ml_gradient", "train_longrun", "train_midrun", "train_shortrun",
]
