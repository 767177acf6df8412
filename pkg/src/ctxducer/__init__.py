"""Cross-utterance discrete-token context modelling for neural-transducer ASR,
small enough to test exhaustively on a desk machine."""

__version__ = "0.1.0"

from .augment import AugmentConfig, augment
from .autodiff import Tensor, grad_check, no_grad
from .corpus import (
    GeneratorConfig,
    Session,
    Utterance,
    Vocabulary,
    attach_tokens,
    generate,
    read_features,
    read_manifest,
    save_corpus,
    write_features,
    write_manifest,
)
from .fusion import ContextCache, FusionConfig, build_context, compact_pool, contextual_forward, fuse
from .loss import brute_force_loss, enumerate_alignments, rnnt_loss, rnnt_loss_pruned
from .metrics import EvalReport, mapsswe, normal_cdf, wer
from .model import ModelConfig, Parameters, init_parameters, load_checkpoint, save_checkpoint
from .quantizer import Codebook, TokenQuantizer, load_codebook, pnmi, quantize, save_codebook, train_codebook
from .recognizer import TransducerRecognizer
from .training import ExperimentConfig, TrainingConfig, load_config, save_config, train_model

__all__ = [
    "AugmentConfig",
    "augment",
    "Tensor",
    "grad_check",
    "no_grad",
    "GeneratorConfig",
    "Session",
    "Utterance",
    "Vocabulary",
    "attach_tokens",
    "generate",
    "read_features",
    "read_manifest",
    "save_corpus",
    "write_features",
    "write_manifest",
    "ContextCache",
    "FusionConfig",
    "build_context",
    "compact_pool",
    "contextual_forward",
    "fuse",
    "brute_force_loss",
    "enumerate_alignments",
    "rnnt_loss",
    "rnnt_loss_pruned",
    "EvalReport",
    "mapsswe",
    "normal_cdf",
    "wer",
    "ModelConfig",
    "Parameters",
    "init_parameters",
    "load_checkpoint",
    "save_checkpoint",
    "Codebook",
    "TokenQuantizer",
    "load_codebook",
    "pnmi",
    "quantize",
    "save_codebook",
    "train_codebook",
    "TransducerRecognizer",
    "ExperimentConfig",
    "TrainingConfig",
    "load_config",
    "save_config",
    "train_model",
]
