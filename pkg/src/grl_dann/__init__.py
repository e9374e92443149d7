"""Domain-adversarial training with a gradient reversal layer, in numpy."""

from .data import SynthConfig, synth_domain_pair
from .evaluation import ConfusionMatrix, evaluate, overall_accuracy, per_class_accuracy
from .model import DannNetwork, TrainConfig, build_network, fit

__all__ = [
    "ConfusionMatrix", "DannNetwork", "SynthConfig", "TrainConfig", "build_network",
    "evaluate", "fit", "overall_accuracy", "per_class_accuracy", "synth_domain_pair",
]
__version__ = "0.1.0"
