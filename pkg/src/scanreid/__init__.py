"""Temporal matching head for video person re-identification.

Clip features go through three linear projections, self attention and
collaborative attention, a gated similarity feature and a verification
logit. Everything is plain numpy with hand-written backward passes.
"""

from . import attention, data, evaluation, losses, model, numkit, similarity, training
from .data import FeatureDataset, SequenceRecord, SyntheticConfig, read_features, synthesize, write_features
from .evaluation import EvalConfig, ScoreMatrix, cmc, ensemble_score, mean_average_precision
from .model import VARIANTS, ModelParams, get_variant
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
