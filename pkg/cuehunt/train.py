"""Training loop, evaluation metrics and predictors."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import islice
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .autograd import DTYPES, Tape, backward, mse_loss, stack
from .checkpoint import Checkpoint, save_checkpoint
from .config import check_keys
from .errors import ConfigurationError, NumericalError
from .model import ArchitectureConfig, ForwardTrace, ParameterSet, init_params, predict
from .optim import AdamState, adam_step
from .scenes import Canvas, CueSpec, Episode, make_episode

logger = logging.getLogger(__name__)

PROTOCOLS = ("omniglot", "shapes")
SUCCESS_THRESHOLDS = (0.10, 0.15)
TRAIN_STREAM = 0
VALIDATION_STREAM = 1
TEST_STREAM = 0

Point = Tuple[float, float]
Predictor = Callable[[Episode], Point]

ARCHITECTURE_PRESETS = {
    "ledger": ArchitectureConfig.ledger,
    "desk": ArchitectureConfig.desk,
    "tiny": ArchitectureConfig.tiny,
}


def resolve_architecture(value, canvas: int) -> ArchitectureConfig:
    """Preset name, dict or config; always sized to the canvas."""
    if value is None:
        value = "desk"
    if isinstance(value, str):
        if value not in ARCHITECTURE_PRESETS:
            raise ConfigurationError(f"Unknown architecture preset '{value}', expected one of {', '.join(ARCHITECTURE_PRESETS)}")
        return ARCHITECTURE_PRESETS[value]().with_size(canvas, canvas)
    if isinstance(value, dict):
        value = ArchitectureConfig.from_dict(value)
    if not isinstance(value, ArchitectureConfig):
        raise ConfigurationError(f"Architecture must be a preset name or mapping, got {type(value).__name__}")
    return value


@dataclass(frozen=True)
class TrainConfig:
    protocol: str = "omniglot"
    cue: CueSpec = field(default_factory=CueSpec)
    canvas: int = 64
    shapes_variant: str = "full"
    shapes_seed: int = 0
    architecture: Optional[ArchitectureConfig] = None
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 50000
    eval_interval: int = 1000
    eval_episodes: int = 64
    seed: int = 0
    data_seed: int = 0
    float_width: str = "float64"
    workers: int = 1

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigurationError(f"Unknown protocol '{self.protocol}', expected one of {', '.join(PROTOCOLS)}")
        if isinstance(self.cue, dict):
            object.__setattr__(self, "cue", CueSpec.from_dict(self.cue))
        object.__setattr__(self, "architecture", resolve_architecture(self.architecture, self.canvas))
        if (self.architecture.height, self.architecture.width) != (self.canvas, self.canvas):
            raise ConfigurationError(
                f"Architecture input {self.architecture.height}×{self.architecture.width} "
                f"does not match the {self.canvas}×{self.canvas} canvas"
            )
        if not self.lr > 0:
            raise ConfigurationError(f"Learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"Batch size must be at least 1, got {self.batch_size}")
        if self.steps < 0 or self.eval_interval < 1 or self.eval_episodes < 1:
            raise ConfigurationError("steps must be >= 0, eval_interval and eval_episodes >= 1")
        if min(self.seed, self.data_seed, self.shapes_seed) < 0:
            raise ConfigurationError("Seeds must be non-negative")
        if self.float_width not in DTYPES:
            raise ConfigurationError(f"float_width must be one of {', '.join(DTYPES)}, got {self.float_width}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be at least 1, got {self.workers}")

    @property
    def scene_canvas(self) -> Canvas:
        return Canvas(size=self.canvas)

    def to_dict(self):
        data = {name: getattr(self, name) for name in self.__dataclass_fields__}
        data["cue"] = self.cue.to_dict()
        data["architecture"] = self.architecture.to_dict()
        return data

    @classmethod
    def from_dict(cls, data):
        check_keys("train", data, cls.__dataclass_fields__)
        return cls(**data)


# ------------------------------------------------------------------ batches

def train_batch(config: TrainConfig, store, step: int) -> List[Episode]:
    """Episodes for a 0-based step; depends only on (data_seed, step)."""
    start = step * config.batch_size
    return [
        make_episode(store, "train", config.cue, config.scene_canvas, config.data_seed, TRAIN_STREAM, start + i)
        for i in range(config.batch_size)
    ]


def validation_episodes(config: TrainConfig, store) -> List[Episode]:
    return [
        make_episode(store, "train", config.cue, config.scene_canvas, config.data_seed, VALIDATION_STREAM, i)
        for i in range(config.eval_episodes)
    ]


def batch_loss(tape: Tape, theta, episodes: Sequence[Episode], arch: ArchitectureConfig):
    dtype = tape.dtype
    preds = [
        predict(ep.adapt_chw(dtype), ep.target_chw(dtype), theta, arch, tape=tape).prediction
        for ep in episodes
    ]
    labels = tape.constant(np.array([ep.label for ep in episodes]))
    return mse_loss(stack(preds), labels)


def train_step(
    params: ParameterSet,
    state: AdamState,
    episodes: Sequence[Episode],
    arch: ArchitectureConfig,
    step: Optional[int] = None,
) -> Tuple[ParameterSet, AdamState, float]:
    """predict → mse_loss → backward → adam_step on one batch."""
    tape = Tape(next(iter(params.tensors.values())).dtype)
    theta = tape.watch_all(params.tensors)
    try:
        loss = batch_loss(tape, theta, episodes, arch)
        grads = backward(tape, loss)
    except NumericalError as e:
        raise NumericalError(e.op, step) from e
    new_tensors, state = adam_step(params.tensors, grads, state)
    if not all(np.all(np.isfinite(v)) for v in new_tensors.values()):
        raise NumericalError("adam_step", step)
    return params.with_tensors(new_tensors), state, loss.item()


def _append_jsonl(path, record):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def train(
    config: TrainConfig,
    store,
    resume: Optional[Checkpoint] = None,
    metric_log=None,
    checkpoint_path=None,
) -> Checkpoint:
    """Run the step budget, starting from ``resume`` when given.

    A checkpoint resumed at step s and trained to step n holds exactly the
    same tensors as an uninterrupted run to step n.
    """
    arch = config.architecture
    dtype = DTYPES[config.float_width]
    if resume is not None:
        if resume.architecture != arch:
            raise ConfigurationError("Checkpoint architecture differs from the training configuration")
        params, state, start = resume.params.astype(dtype), resume.adam.copy(), resume.step
        metrics = dict(resume.metrics)
    else:
        params = init_params(arch, config.seed).astype(dtype)
        state = AdamState.for_params(params.tensors, lr=config.lr)
        start, metrics = 0, {}
    if start > config.steps:
        raise ConfigurationError(f"Checkpoint is at step {start}, beyond the {config.steps}-step budget")

    logger.info(
        f"Training {config.protocol} localizer from step {start} to {config.steps} "
        f"(batch {config.batch_size}, lr {config.lr}, {config.float_width})"
    )
    validation = validation_episodes(config, store) if config.steps > start else []
    if metric_log:
        os.makedirs(os.path.dirname(os.path.abspath(metric_log)), exist_ok=True)

    for step in range(start, config.steps):
        params, state, loss = train_step(params, state, train_batch(config, store, step), arch, step=step + 1)
        logger.debug(f"step {step + 1}: loss {loss:.6f}")
        done = step + 1
        if done % config.eval_interval == 0 or done == config.steps:
            report = evaluate(ModelPredictor(params, arch), validation, workers=config.workers)
            metrics = {
                "step": done,
                "loss": loss,
                "val_mse": report.mse,
                "val_success_at_10": report.success_at_10,
                "val_success_at_15": report.success_at_15,
            }
            logger.info(
                f"step {done}: loss {loss:.5f}, val mse {report.mse:.5f}, "
                f"success@10 {report.success_at_10:.3f}, success@15 {report.success_at_15:.3f}"
            )
            if metric_log:
                _append_jsonl(metric_log, metrics)
            if checkpoint_path:
                save_checkpoint(_checkpoint(config, params, state, done, metrics), checkpoint_path)

    return _checkpoint(config, params, state, max(start, config.steps), metrics)


def _checkpoint(config, params, state, step, metrics):
    return Checkpoint(
        architecture=config.architecture,
        params=params,
        adam=state,
        step=step,
        seed=config.seed,
        metrics=metrics,
        train_config=config.to_dict(),
    )


# --------------------------------------------------------------- evaluation

class ModelPredictor:
    """Frozen-parameter inference; never writes to the parameters."""

    def __init__(self, params: ParameterSet, arch: ArchitectureConfig):
        self.params = params
        self.arch = arch
        self.dtype = next(iter(params.tensors.values())).dtype

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ModelPredictor":
        return cls(ckpt.params, ckpt.architecture)

    def trace(self, episode: Episode) -> ForwardTrace:
        return predict(
            episode.adapt_chw(self.dtype), episode.target_chw(self.dtype), self.params, self.arch, dtype=self.dtype
        )

    def __call__(self, episode: Episode) -> Point:
        return self.trace(episode).point


@dataclass
class EvalReport:
    episodes: int
    mse: float
    axis_rms: float
    success_at_10: float
    success_at_15: float
    mse_successful: Optional[float]
    failure_ids: List[str] = field(default_factory=list)
    records: List[Dict[str, object]] = field(default_factory=list, repr=False)

    @property
    def percent(self) -> float:
        """Per-axis RMS error as a percentage of the canvas side."""
        return 100.0 * self.axis_rms

    def summary(self) -> Dict[str, object]:
        return {
            "episodes": self.episodes,
            "mse": self.mse,
            "axis_rms": self.axis_rms,
            "percent": self.percent,
            "success_at_10": self.success_at_10,
            "success_at_15": self.success_at_15,
            "mse_successful": self.mse_successful,
            "failures": len(self.failure_ids),
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self.records)

    def write(self, out_dir, prefix: str = "eval") -> Tuple[str, str]:
        """Per-episode records and the summary, both as line-delimited JSON."""
        os.makedirs(out_dir, exist_ok=True)
        records_path = os.path.join(out_dir, f"{prefix}_episodes.jsonl")
        summary_path = os.path.join(out_dir, f"{prefix}_summary.jsonl")
        self.to_frame().to_json(records_path, orient="records", lines=True)
        with open(summary_path, "w", encoding="utf-8") as f:
            f.write(json.dumps(self.summary(), sort_keys=True) + "\n")
        return records_path, summary_path


def _score(episode, point) -> Dict[str, object]:
    lx, ly = (float(v) for v in episode.label)
    px, py = (float(v) for v in point)
    sq = (px - lx) ** 2 + (py - ly) ** 2
    err = math.sqrt(sq)
    return {
        "episode_id": episode.episode_id,
        "label_x": lx,
        "label_y": ly,
        "pred_x": px,
        "pred_y": py,
        "sq_error": sq,
        "error": err,
        "success_at_10": err <= SUCCESS_THRESHOLDS[0],
        "success_at_15": err <= SUCCESS_THRESHOLDS[1],
    }


def evaluate(predictor: Predictor, episodes: Iterable[Episode], n: Optional[int] = None, workers: int = 1) -> EvalReport:
    """Metrics of ``predictor`` over the first ``n`` episodes (all when n is None).

    Workers only change who computes a prediction; records stay in episode order.
    """
    if n is not None and n < 1:
        raise ConfigurationError(f"Evaluation needs at least one episode, got n={n}")
    episodes = list(islice(episodes, n)) if n is not None else list(episodes)
    if not episodes:
        raise ConfigurationError("Evaluation needs at least one episode")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(predictor, episodes))
    else:
        points = [predictor(ep) for ep in episodes]

    records = [_score(ep, pt) for ep, pt in zip(episodes, points)]
    sq = np.array([r["sq_error"] for r in records])
    ok = np.array([r["success_at_15"] for r in records])
    mse = float(np.mean(sq))
    return EvalReport(
        episodes=len(records),
        mse=mse,
        axis_rms=math.sqrt(mse / 2.0),
        success_at_10=float(np.mean([r["success_at_10"] for r in records])),
        success_at_15=float(np.mean(ok)),
        mse_successful=float(np.mean(sq[ok])) if ok.any() else None,
        failure_ids=[r["episode_id"] for r in records if not r["success_at_15"]],
        records=records,
    )
