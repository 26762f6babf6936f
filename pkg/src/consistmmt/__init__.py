"""Multimodal Transformer translation with prediction and representation consistency."""

from .data import BpeModel, FeatureTable, Vocabulary, learn_bpe, load_features, make_batches
from .errors import (
    AutodiffError,
    DataError,
    DegenerateMassError,
    FormatError,
    MaskError,
    MMTError,
    NumericsError,
    ShapeError,
    VocabError,
)
from .inference import beam_search, corpus_bleu, greedy_decode, similarity_probe
from .losses import LossBreakdown, LossWeights, kl_consistency, ot_loss, relaxed_ot_distance
from .model import ModelConfig, MultimodalTransformer
from .tensor import Tensor, backward, no_grad
from .training import Adam, Trainer, TrainerConfig, average_checkpoints, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
