"""Experiment configuration, optimizers, and the training / fine-tuning loops.

The loop walks sessions in serialized order (utterances ascending by start
time) so neighbour contexts always exist: the preceding utterance is re-run
under the current parameters and the future utterance is encoded on demand.
One utterance per step keeps the whole pipeline bit-reproducible under a
fixed seed.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import fusion as fus
from . import model as mdl
from .augment import AugmentConfig, augment as augment_sequence
from .corpus import GeneratorConfig, Vocabulary
from .exceptions import ConfigError, NotFiniteError, ShapeError, TrainingDivergedError
from .loss import rnnt_loss_tensor
from .metrics import EvalReport
from .decoding import decode_sessions
from .seeding import derive_rng

DEV_SEED_OFFSET = 7919


@dataclass
class QuantizerConfig:
    n_clusters: int = 64
    max_iter: int = 50


@dataclass
class TrainingConfig:
    optimizer: str = "adam"  # or "sgd"
    learning_rate: float = 0.0002
    batch_size: int = 1
    epochs: int = 30
    seed: int = 0
    loss_band: int | None = 4  # None -> exact transducer loss

    def validate(self) -> None:
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.loss_band is not None and self.loss_band < 1:
            raise ConfigError("loss_band must be >= 1 or null")


@dataclass
class PathsConfig:
    train_manifest: str = ""
    dev_manifest: str = ""
    codebook: str = ""
    out_dir: str = ""


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    model: mdl.ModelConfig = field(default_factory=mdl.ModelConfig)
    fusion: fus.FusionConfig = field(default_factory=fus.FusionConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        def convert(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        return convert(self)


_SECTION_TYPES = {
    "generator": GeneratorConfig,
    "quantizer": QuantizerConfig,
    "model": mdl.ModelConfig,
    "fusion": fus.FusionConfig,
    "augment": AugmentConfig,
    "training": TrainingConfig,
    "paths": PathsConfig,
}


def _dataclass_from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if f.type == "tuple" or isinstance(f.default, tuple):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Strict ExperimentConfig parser: unknown keys anywhere are rejected."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"config: unknown sections {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        sections[name] = _dataclass_from_dict(cls, data.get(name, {}), name)
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_dict(json.load(f))


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, sort_keys=True, indent=1)
        f.write("\n")


def dev_generator_config(gen: GeneratorConfig, dev_sessions: int | None = None) -> GeneratorConfig:
    """Held-out corpus: same world (phone inventory, coupling), fresh sessions."""
    n = dev_sessions if dev_sessions is not None else max(1, gen.num_sessions // 4)
    return dataclasses.replace(gen, num_sessions=n, seed=gen.seed + DEV_SEED_OFFSET)


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self._m: dict = {}
        self._v: dict = {}

    def step(self, params: mdl.Parameters) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, tensor in params.items():
            if tensor.grad is None:
                continue
            g = tensor.grad
            m = self._m.setdefault(name, np.zeros_like(tensor.values))
            v = self._v.setdefault(name, np.zeros_like(tensor.values))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            params.set_values(name, tensor.values - update)

    def state_arrays(self) -> dict:
        out = {"optim.step": np.asarray([float(self.step_count)])}
        for name in sorted(self._m):
            out[f"optim.adam.m.{name}"] = self._m[name]
            out[f"optim.adam.v.{name}"] = self._v[name]
        return out

    def load_state(self, arrays: dict) -> None:
        self.step_count = int(arrays.get("optim.step", np.zeros(1))[0])
        self._m = {
            k[len("optim.adam.m.") :]: arrays[k].copy() for k in arrays if k.startswith("optim.adam.m.")
        }
        self._v = {
            k[len("optim.adam.v.") :]: arrays[k].copy() for k in arrays if k.startswith("optim.adam.v.")
        }


class SGD:
    """Plain gradient descent, kept for gradient-audit runs."""

    def __init__(self, lr: float):
        self.lr = lr
        self.step_count = 0

    def step(self, params: mdl.Parameters) -> None:
        self.step_count += 1
        for name, tensor in params.items():
            if tensor.grad is None:
                continue
            params.set_values(name, tensor.values - self.lr * tensor.grad)

    def state_arrays(self) -> dict:
        return {"optim.step": np.asarray([float(self.step_count)])}

    def load_state(self, arrays: dict) -> None:
        self.step_count = int(arrays.get("optim.step", np.zeros(1))[0])


def make_optimizer(cfg: TrainingConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


# ---------------------------------------------------------------------------
# forward + loss for one utterance


def utterance_loss(
    utt,
    prev,
    future,
    params: mdl.Parameters,
    cfg: ExperimentConfig,
    vocab: Vocabulary,
    augment_rng: np.random.Generator | None = None,
):
    """Scalar transducer loss for one utterance under the configured fusion."""
    labels = vocab.encode(utt.transcript)
    augment_fn = None
    if augment_rng is not None and cfg.augment.enabled:
        augment_fn = lambda x: augment_sequence(x, cfg.augment, augment_rng)  # noqa: E731
    result = fus.contextual_forward(
        utt, params, cfg.model, cfg.fusion, prev=prev, future=future, augment_fn=augment_fn
    )
    f = mdl.predict_all(labels, params, cfg.model)
    logits = mdl.joint_all(result.encoded, f, params)
    return rnnt_loss_tensor(logits, labels, band=cfg.training.loss_band)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: mdl.Parameters
    optimizer: object
    epoch_losses: list
    step_losses: list
    vocab: Vocabulary
    wer: dict
    train_seconds: float
    decode_fps: float
    epochs_done: int

    def report_dict(self, cfg: ExperimentConfig) -> dict:
        """Deterministic run report (volatile timings live in timing_dict)."""
        return {
            "epoch_losses": self.epoch_losses,
            "wer": self.wer,
            "config": cfg.to_dict(),
            "seed": cfg.training.seed,
            "code_version": __version__,
        }

    def timing_dict(self) -> dict:
        return {"train_seconds": self.train_seconds, "decode_fps": self.decode_fps}


def resolve_model_config(cfg: ExperimentConfig, sessions, vocab: Vocabulary) -> mdl.ModelConfig:
    """Fill inferred sizes (vocabulary, codebook, feature dim) into the model config."""
    m = dataclasses.replace(cfg.model)
    if m.vocab_size == 0:
        m.vocab_size = vocab.size
    if m.input_kind == "discrete" and m.token_vocab_size == 0:
        m.token_vocab_size = cfg.quantizer.n_clusters
    if m.input_kind == "continuous" and m.feature_dim == 0:
        for s in sessions:
            for u in s.utterances:
                if u.features is not None:
                    m.feature_dim = u.features.shape[1]
                    break
            if m.feature_dim:
                break
    m.validate()
    return m


def init_experiment_parameters(cfg: ExperimentConfig, model_cfg: mdl.ModelConfig) -> mdl.Parameters:
    compact_len = cfg.fusion.compact_len if cfg.fusion.mode == "compact" else None
    return mdl.init_parameters(model_cfg, cfg.training.seed, compact_len=compact_len)


def _dump_divergence(cfg: ExperimentConfig, out_dir, epoch: int, step: int, losses: list) -> str:
    if not out_dir:
        return ""
    path = Path(out_dir) / "divergence_dump.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(
            {
                "epoch": epoch,
                "step": step,
                "recent_losses": losses[-20:],
                "config": cfg.to_dict(),
            },
            f,
            sort_keys=True,
            indent=1,
        )
    return str(path)


def train_model(
    train_sessions,
    dev_sessions,
    cfg: ExperimentConfig,
    params: mdl.Parameters | None = None,
    optimizer=None,
    start_epoch: int = 0,
    vocab: Vocabulary | None = None,
    out_dir: str = "",
    decode_dev: bool = True,
) -> TrainResult:
    """Run the serialized training loop and score the dev split."""
    cfg.training.validate()
    cfg.fusion.validate()
    if vocab is None:
        vocab = Vocabulary.from_transcripts(train_sessions)
    model_cfg = resolve_model_config(cfg, train_sessions, vocab)
    if params is None:
        params = init_experiment_parameters(cfg, model_cfg)
    if optimizer is None:
        optimizer = make_optimizer(cfg.training)

    epoch_losses: list = []
    step_losses: list = []
    started = time.perf_counter()
    step = 0
    for epoch in range(start_epoch, cfg.training.epochs):
        epoch_total = 0.0
        epoch_count = 0
        for s_idx, session in enumerate(train_sessions):
            utts = session.utterances
            for i, utt in enumerate(utts):
                prev = utts[i - 1] if i > 0 else None
                future = utts[i + 1] if i < len(utts) - 1 else None
                rng = derive_rng(cfg.training.seed, "augment", epoch, session.session_id, utt.index)
                run_cfg = dataclasses.replace(cfg, model=model_cfg)
                params.zero_grad()
                try:
                    loss = utterance_loss(utt, prev, future, params, run_cfg, vocab, augment_rng=rng)
                    value = loss.item()
                    loss.backward()
                except NotFiniteError as e:
                    dump = _dump_divergence(cfg, out_dir, epoch, step, step_losses)
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {step}"
                        + (f"; state dump: {dump}" if dump else "")
                    ) from e
                optimizer.step(params)
                step_losses.append(value)
                epoch_total += value
                epoch_count += 1
                step += 1
        epoch_losses.append(epoch_total / max(epoch_count, 1))
    train_seconds = time.perf_counter() - started

    wer_by_split: dict = {}
    decode_fps = 0.0
    if decode_dev and dev_sessions:
        report = EvalReport()
        rows, decode_fps = decode_sessions(dev_sessions, params, model_cfg, cfg.fusion, vocab)
        hyp_by_id = {r["utterance_id"]: r["words"].split() for r in rows}
        for s in dev_sessions:
            for u in s.utterances:
                report.add(u.utterance_id, list(u.transcript), hyp_by_id[u.utterance_id])
        wer_by_split["dev"] = report.aggregate_wer

    return TrainResult(
        params=params,
        optimizer=optimizer,
        epoch_losses=epoch_losses,
        step_losses=step_losses,
        vocab=vocab,
        wer=wer_by_split,
        train_seconds=train_seconds,
        decode_fps=decode_fps,
        epochs_done=cfg.training.epochs,
        )


# ---------------------------------------------------------------------------
# checkpoints with optimizer state and a JSON sidecar


def save_training_checkpoint(
    path, params: mdl.Parameters, optimizer, model_cfg: mdl.ModelConfig,
    fusion_cfg: fus.FusionConfig, vocab: Vocabulary, epochs_done: int,
) -> None:
    arrays = dict(params.arrays())
    arrays.update(optimizer.state_arrays())
    arrays["meta.epochs_done"] = np.asarray([float(epochs_done)])
    mdl.save_checkpoint(arrays, path)
    sidecar = {
        "model": dataclasses.asdict(model_cfg),
        "fusion": dataclasses.asdict(fusion_cfg),
        "vocab": list(vocab.words),
        "code_version": __version__,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True, indent=1)
        f.write("\n")


def load_training_checkpoint(path) -> tuple:
    """Returns (param_arrays, optim_arrays, model_cfg, fusion_cfg, vocab, epochs_done)."""
    arrays = mdl.load_checkpoint(path)
    sidecar_path = str(path) + ".json"
    with open(sidecar_path, "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    model_cfg = _dataclass_from_dict(mdl.ModelConfig, sidecar["model"], "checkpoint model")
    fusion_cfg = _dataclass_from_dict(fus.FusionConfig, sidecar["fusion"], "checkpoint fusion")
    vocab = Vocabulary(words=tuple(sidecar["vocab"]))
    params_arrays = {}
    optim_arrays = {}
    epochs_done = 0
    for name, arr in arrays.items():
        if name == "meta.epochs_done":
            epochs_done = int(arr[0])
        elif name.startswith("optim."):
            optim_arrays[name] = arr
        else:
            params_arrays[name] = arr
    return params_arrays, optim_arrays, model_cfg, fusion_cfg, vocab, epochs_done


def params_from_arrays(arrays: dict) -> mdl.Parameters:
    params = mdl.Parameters()
    for name, arr in arrays.items():
        params.add(name, arr)
    return params


# ---------------------------------------------------------------------------
# fine-tuning


def finetune_params(
    init_params_arrays: dict,
    target_params: mdl.Parameters,
    reinit_output: bool = True,
) -> mdl.Parameters:
    """Inherit checkpoint weights into ``target_params``.

    Every tensor present in both must match in shape, except the output
    projection pair (``joint.out.*``) which may differ and is re-drawn from
    its seeded init stream when ``reinit_output`` is set. Tensors absent
    from the checkpoint (a fusion module the base model lacked) keep their
    fresh initialization.
    """
    out = mdl.Parameters()
    for name, tensor in target_params.items():
        if reinit_output and name.startswith("joint.out."):
            out.add(name, tensor.values)  # already freshly initialized for the target
            continue
        if name in init_params_arrays:
            src = init_params_arrays[name]
            if src.shape != tensor.values.shape:
                if name.startswith("joint.out."):
                    raise ShapeError(
                        f"{name}: shape {src.shape} != {tensor.values.shape}; "
                        "pass reinit_output=True to replace the output projection"
                    )
                raise ShapeError(f"{name}: checkpoint shape {src.shape} != model {tensor.values.shape}")
            out.add(name, src)
        else:
            out.add(name, tensor.values)
    return out
