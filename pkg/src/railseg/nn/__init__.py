from .checkpoint import Checkpoint
from .kernels import ball_query, fps, interpolate_idw
from .network import NetConfig, SAConfig, SegNetwork, backward, loss_ce
from .train import TrainReport, predict, train

__all__ = [
    "Checkpoint", "NetConfig", "SAConfig", "SegNetwork", "TrainReport",
    "backward", "ball_query", "fps", "interpolate_idw", "loss_ce", "predict", "train",
]
