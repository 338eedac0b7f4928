"""Part-based ranking network with batch-adaptive margins, written on numpy."""

from .estimator import PartRankingEmbedder
from .network import NetConfig, ParamSet, forward, init_params
from .trainer import TrainConfig, train

__all__ = ["NetConfig", "ParamSet", "PartRankingEmbedder", "TrainConfig", "forward", "init_params", "train"]
__version__ = "0.1.0"
