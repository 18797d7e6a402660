"""Toy multimodal decoder for studying how rotary position assignment affects spatial bias.

Two position schemes are provided: plain sequential ids, and a balanced scheme
that gives every image token the same id.
"""

from .model import ModelConfig, MultimodalInput, init_model, load_checkpoint, save_checkpoint
from .positions import ModalityLayout, assign_bapa, assign_sequential, scheme_for
from .rope import RopeParams, make_thetas, rotated_dot

__version__ = "0.1.0"

__all__ = [
    "ModalityLayout",
    "ModelConfig",
    "MultimodalInput",
    "RopeParams",
    "assign_bapa",
    "assign_sequential",
    "init_model",
    "load_checkpoint",
    "make_thetas",
    "rotated_dot",
    "save_checkpoint",
    "scheme_for",
]
