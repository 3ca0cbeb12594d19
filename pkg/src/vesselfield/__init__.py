"""Two-view cone-beam reconstruction of vessel trees with a neural occupancy field."""
from .geometry import GeometryError, ProjectionGeometry, VolumeGrid
from .hashgrid import HashEncoderConfig
from .field import MlpConfig
from .projector import ProjectionOperator, ProjectorConfig, backproject, forward_project
from .trainer import NumericalFailure, TrainConfig, train
from .metrics import MetricsReport, evaluate_case
from .stats import aso_test
from .phantom import PhantomSpec, generate_phantom

__version__ = "0.1.0"

__all__ = [
    "GeometryError",
    "ProjectionGeometry",
    "VolumeGrid",
    "HashEncoderConfig",
    "MlpConfig",
    "ProjectionOperator",
    "ProjectorConfig",
    "backproject",
    "forward_project",
    "NumericalFailure",
    "TrainConfig",
    "train",
    "MetricsReport",
    "evaluate_case",
    "aso_test",
    "PhantomSpec",
    "generate_phantom",
]
