from pyspil.envmodels import CarFollowing, LinearToy, ModelSpec, RobotNavigation
from pyspil.models import ExperimentConfig, MultiplierConfig, SurrogateConfig, TrainerConfig
from pyspil.multiplier import MultiplierController
from pyspil.network import NetTopology, ParamVector
from pyspil.trainer import evaluate, train

__all__ = [
    "CarFollowing",
    "LinearToy",
    "ModelSpec",
    "RobotNavigation",
    "ExperimentConfig",
    "MultiplierConfig",
    "SurrogateConfig",
    "TrainerConfig",
    "MultiplierController",
    "NetTopology",
    "ParamVector",
    "evaluate",
    "train",
]
