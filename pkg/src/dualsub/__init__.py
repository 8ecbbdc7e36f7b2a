"""Joint captioning and subtitling with a dual-decoder transformer, in numpy."""

from .autodiff import get_precision, precision, set_precision
from .model import ModelConfig, Transformer, count_parameters
from .text import Triplet, Vocab, generate_toy_corpus, learn_bpe

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "Transformer",
    "Triplet",
    "Vocab",
    "count_parameters",
    "generate_toy_corpus",
    "get_precision",
    "learn_bpe",
    "precision",
    "set_precision",
]
