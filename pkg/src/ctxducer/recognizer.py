"""A fit/predict wrapper around the contextual transducer pipeline."""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .augment import AugmentConfig
from . import fusion as fus
from . import model as mdl
from . import training as trn
from .corpus import Vocabulary
from .decoding import decode_sessions
from .exceptions import ShapeError
from .metrics import EvalReport


def check_sessions(sessions, input_kind: str) -> None:
    if not sessions:
        raise ShapeError("need at least one session")
    for s in sessions:
        for u in s.utterances:
            if input_kind == "discrete" and u.tokens is None:
                raise ShapeError(f"{u.utterance_id}: discrete input requires tokens; run attach_tokens")
            if input_kind == "continuous" and u.features is None:
                raise ShapeError(f"{u.utterance_id}: continuous input requires features")


class TransducerRecognizer(BaseEstimator):
    """Contextual transducer recognizer with a scikit-learn style interface.

    ``fit`` trains on token- or feature-bearing sessions (one optimizer step
    per utterance, sessions walked in start-time order so neighbour contexts
    exist); ``predict`` greedily decodes each utterance with the same fusion
    configuration. All constructor arguments are plain values so that
    ``get_params`` / ``set_params`` / ``clone`` behave as usual.
    """

    def __init__(
        self,
        model_dim: int = 16,
        num_heads: int = 2,
        downsample_factors: tuple = (1, 2),
        blocks_per_stack: int = 1,
        token_embed_dim: int = 16,
        pred_embed_dim: int = 16,
        pred_context: int = 2,
        pred_dim: int = 16,
        joint_dim: int = 16,
        ff_dim: int = 32,
        input_kind: str = "discrete",
        feature_dim: int = 0,
        token_vocab_size: int = 0,
        fusion_mode: str = "none",
        n_preceding: int = 0,
        n_future: int = 0,
        compact_len: int = 32,
        detach_context: bool = True,
        final_layer_context: bool = False,
        optimizer: str = "adam",
        learning_rate: float = 0.0002,
        epochs: int = 5,
        loss_band: int | None = 4,
        augment_enabled: bool = False,
        max_symbols_per_frame: int = 5,
        random_state: int = 0,
    ):
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.downsample_factors = downsample_factors
        self.blocks_per_stack = blocks_per_stack
        self.token_embed_dim = token_embed_dim
        self.pred_embed_dim = pred_embed_dim
        self.pred_context = pred_context
        self.pred_dim = pred_dim
        self.joint_dim = joint_dim
        self.ff_dim = ff_dim
        self.input_kind = input_kind
        self.feature_dim = feature_dim
        self.token_vocab_size = token_vocab_size
        self.fusion_mode = fusion_mode
        self.n_preceding = n_preceding
        self.n_future = n_future
        self.compact_len = compact_len
        self.detach_context = detach_context
        self.final_layer_context = final_layer_context
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.loss_band = loss_band
        self.augment_enabled = augment_enabled
        self.max_symbols_per_frame = max_symbols_per_frame
        self.random_state = random_state

    def _experiment_config(self) -> trn.ExperimentConfig:
        model = mdl.ModelConfig(
            token_vocab_size=self.token_vocab_size,
            token_embed_dim=self.token_embed_dim,
            downsample_factors=tuple(self.downsample_factors),
            blocks_per_stack=self.blocks_per_stack,
            model_dim=self.model_dim,
            num_heads=self.num_heads,
            ff_dim=self.ff_dim,
            pred_embed_dim=self.pred_embed_dim,
            pred_context=self.pred_context,
            pred_dim=self.pred_dim,
            joint_dim=self.joint_dim,
            input_kind=self.input_kind,
            feature_dim=self.feature_dim,
        )
        fusion = fus.FusionConfig(
            mode=self.fusion_mode,
            n_preceding=self.n_preceding,
            n_future=self.n_future,
            detach_context=self.detach_context,
            compact_len=self.compact_len,
            final_layer_context=self.final_layer_context,
        )
        augment = AugmentConfig(enabled=self.augment_enabled, seed=self.random_state)
        training = trn.TrainingConfig(
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            seed=self.random_state,
            loss_band=self.loss_band,
        )
        return trn.ExperimentConfig(model=model, fusion=fusion, augment=augment, training=training)

    def fit(self, sessions, y=None):
        check_sessions(sessions, self.input_kind)
        cfg = self._experiment_config()
        if self.input_kind == "discrete" and cfg.model.token_vocab_size == 0:
            cfg.model.token_vocab_size = (
                int(max(u.tokens.max() for s in sessions for u in s.utterances if u.tokens.size)) + 1
            )
        result = trn.train_model(sessions, [], cfg, decode_dev=False)
        self.params_ = result.params
        self.vocab_ = result.vocab
        self.model_config_ = trn.resolve_model_config(cfg, sessions, result.vocab)
        self.fusion_config_ = cfg.fusion
        self.epoch_losses_ = result.epoch_losses
        self.n_iter_ = result.epochs_done
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError("TransducerRecognizer is not fitted; call fit first")

    def predict(self, sessions) -> list:
        """Hypothesis word list per utterance, flattened in session order."""
        self._check_fitted()
        check_sessions(sessions, self.input_kind)
        rows, _ = decode_sessions(
            sessions, self.params_, self.model_config_, self.fusion_config_, self.vocab_,
            max_symbols_per_frame=self.max_symbols_per_frame,
        )
        return [r["words"].split() for r in rows]

    def score(self, sessions, y=None) -> float:
        """1 - aggregate WER (may be negative with heavy insertions)."""
        self._check_fitted()
        hyps = self.predict(sessions)
        report = EvalReport()
        i = 0
        for s in sessions:
            for u in s.utterances:
                report.add(u.utterance_id, list(u.transcript), hyps[i])
                i += 1
        return 1.0 - report.aggregate_wer
