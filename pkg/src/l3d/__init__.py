"""Decompose small MLPs into low-rank parameter-space subnetworks that
reconstruct per-sample divergence gradients under a batch top-k constraint.

Modules: ``numkit`` (rng, optimizer, tensor helpers), ``models`` (toy MLPs,
tasks, training), ``tucker`` and ``decomposition`` (the learned basis),
``analysis`` (interventions, impact, matching), ``config``, ``io``, ``cli``.
"""
from .config import ExperimentConfig, load_config
from .decomposition import DecompositionConfig, SubnetworkBasis, evaluate_l3d, train_l3d
from .errors import ConfigError, FormatError, L3DError, NumericalError, ShapeError
from .models import MlpSpec, ToyTrainConfig, make_task, preset_spec, train_toy
from .numkit import ParamSet, Rng

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "load_config",
    "DecompositionConfig",
    "SubnetworkBasis",
    "evaluate_l3d",
    "train_l3d",
    "ConfigError",
    "FormatError",
    "L3DError",
    "NumericalError",
    "ShapeError",
    "MlpSpec",
    "ToyTrainConfig",
    "make_task",
    "preset_spec",
    "train_toy",
    "ParamSet",
    "Rng",
]
