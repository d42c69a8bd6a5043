"""Learned P-frame video codec: pyramid motion estimation, learned motion and
residual coding with factorized entropy models, and an ODVC bitstream container."""

from .codec import decode_pframe, decode_sequence, encode_pframe, encode_sequence
from .evaluate import RdPoint, evaluate
from .model import CodecModel, load_checkpoint, save_checkpoint
from .training import TrainingSchedule, train_progressive

__version__ = "0.1.0"

__all__ = [
    "CodecModel", "RdPoint", "TrainingSchedule", "decode_pframe", "decode_sequence",
    "encode_pframe", "encode_sequence", "evaluate", "load_checkpoint", "save_checkpoint",
    "train_progressive",
]
