"""Adam, the epoch loop, k-fold cross-validation and pmf-averaging ensembles."""

from __future__ import annotations

import logging
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .checkpoint import save_checkpoint
from .data import Batch, FeatureFrame, UNKNOWN, make_batches, stratified_kfold
from .model import ModelConfig, ModelParams, _coerce, bind, forward_many_to_many, logits_cube
from .objective import (BALANCED, UNWEIGHTED, WEIGHTED, LossConfig, compute_length_weights,
                        popularity_top, rank, recall_at_k, sequence_loss, softmax)

logger = logging.getLogger(__name__)

MANY_TO_MANY = "MANY_TO_MANY"
MANY_TO_ONE = "MANY_TO_ONE"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    folds: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    model_type: str = MANY_TO_MANY
    weight_mode: str = UNWEIGHTED
    weight_scheme: str = BALANCED
    sort_by_length: bool = True
    precision: int = 32
    eval_batch_size: int = 1024
    k: int = 4

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.model_type not in (MANY_TO_MANY, MANY_TO_ONE):
            raise ValueError(f"unknown model_type {self.model_type!r}")
        if self.weight_mode not in (UNWEIGHTED, WEIGHTED):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig(**{**asdict(self), **changes})

    def to_lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in asdict(self).items()]

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> TrainConfig:
        return cls(**{f.name: _coerce(f.type, values[f.name])
                      for f in fields(cls) if f.name in values})


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{n}: expected key=value, got {raw!r}")
        values[key.strip()] = value.strip()
    return values


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name} at step {state.step + 1}")
        if g.shape != params.arrays[name].shape:
            raise tc.DimensionError(f"gradient {name} {g.shape} vs {params.arrays[name].shape}")
    b1, b2, eps = config.beta1, config.beta2, config.adam_epsilon
    t = state.step + 1
    m_new, v_new, arrays = {}, {}, {}
    for name, p in params.arrays.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        arrays[name] = (p - config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        m_new[name], v_new[name] = m.astype(p.dtype), v.astype(p.dtype)
    return (ModelParams(params.config, params.cardinalities, arrays),
            AdamState(m_new, v_new, t))


# --------------------------------------------------------------------------
# evaluation


def final_pmfs(frames: Sequence[FeatureFrame], params: ModelParams,
               batch_size: int = 1024) -> np.ndarray:
    """pmf at each frame's last step, in input order (dropout off)."""
    weights = bind(params)
    out = np.zeros((len(frames), params.n_cities))
    order = sorted(range(len(frames)), key=lambda i: frames[i].steps)
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        batch = Batch.from_frames([frames[i] for i in idx])
        logits = forward_many_to_many(batch, weights, params.config)
        cube = logits_cube(logits, batch.size)
        last = cube[np.arange(batch.size), batch.lengths - 1]
        out[idx] = softmax(last.astype(np.float64))
    return out


def final_targets(frames: Sequence[FeatureFrame]) -> np.ndarray:
    return np.array([f.targets[f.steps - 1] for f in frames], dtype=np.int64)


def evaluate_recall(frames: Sequence[FeatureFrame], params: ModelParams | Ensemble,
                    k: int = 4, batch_size: int = 1024) -> float:
    if isinstance(params, Ensemble):
        pmfs = params.predict(frames, batch_size)
    else:
        pmfs = final_pmfs(frames, params, batch_size)
    return recall_at_k(rank(pmfs, final_targets(frames), k, exclude=(UNKNOWN,)), k)


def popularity_recall(train_frames: Sequence[FeatureFrame], eval_frames: Sequence[FeatureFrame],
                      k: int = 4) -> float:
    """recall@k of recommending the k most frequent training target cities."""
    targets = np.concatenate([f.targets for f in train_frames])
    top = tuple(int(i) for i in popularity_top(targets, k, exclude=(UNKNOWN,)))
    truths = final_targets(eval_frames)
    return float(np.isin(truths, top).mean())


# --------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_recall: float
    val_loss: float
    val_recall: float
    loss_steps: int  # prediction steps that entered the training loss


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    best_recall: float
    checkpoint: str | None
    history: list[EpochStats]
    params: ModelParams | None = None


def best_epoch(recalls: Sequence[float]) -> int:
    """1-based epoch of the first maximum."""
    return int(np.argmax(np.asarray(recalls))) + 1


def loss_config_for(frames: Sequence[FeatureFrame], config: TrainConfig) -> LossConfig:
    if config.weight_mode == UNWEIGHTED:
        return LossConfig(UNWEIGHTED)
    hist = Counter(f.steps for f in frames)
    return LossConfig(WEIGHTED, compute_length_weights(hist, config.weight_scheme))


def _loss_mask(batch: Batch, config: TrainConfig) -> np.ndarray:
    return batch.mask if config.model_type == MANY_TO_MANY else batch.final_step_mask()


def _rng(config: TrainConfig, fold: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, fold, *stream])


def train_fold(train_frames: Sequence[FeatureFrame], val_frames: Sequence[FeatureFrame],
               model_config: ModelConfig, train_config: TrainConfig,
               cardinalities: Sequence[int], fold: int = 0,
               out_dir: str | os.PathLike | None = None) -> FoldResult:
    """Train one model, keeping the epoch with the best validation recall@k."""
    if not train_frames or not val_frames:
        raise ValueError("train_fold needs nonempty train and validation frames")
    with tc.precision(train_config.precision):
        return _train_fold(train_frames, val_frames, model_config, train_config,
                           cardinalities, fold, out_dir)


def _train_fold(train_frames, val_frames, model_config, cfg, cardinalities, fold, out_dir):
    params = ModelParams.init(model_config, cardinalities, _rng(cfg, fold, 0))
    state = AdamState()
    loss_config = loss_config_for(train_frames, cfg)
    val_batches = make_batches(val_frames, cfg.eval_batch_size, True, 0)
    ckpt = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        ckpt = str(Path(out_dir) / "checkpoint.sse")
    history: list[EpochStats] = []
    best, best_params = None, None
    for epoch in range(1, cfg.epochs + 1):
        batches = make_batches(train_frames, cfg.batch_size, cfg.sort_by_length,
                               _rng(cfg, fold, 1, epoch).integers(2**32))
        dropout_rng = _rng(cfg, fold, 2, epoch)
        loss_sum, steps_sum, hits, trips = 0.0, 0, 0, 0
        for n, batch in enumerate(batches):
            tape = tc.Tape()
            weights = bind(params, tape)
            logits = forward_many_to_many(batch, weights, model_config, train=True,
                                          rng=dropout_rng)
            mask = _loss_mask(batch, cfg)
            try:
                loss = sequence_loss(logits, batch.targets, mask, loss_config)
            except tc.NumericError as err:
                raise TrainingDiverged(f"fold {fold} epoch {epoch} batch {n}: {err}") from err
            grads = tape.backward(loss)
            params, state = adam_step(params, grads, state, cfg)
            valid = int(mask.sum())
            loss_sum += loss.item() * valid
            steps_sum += valid
            cube = logits_cube(logits, batch.size)
            last = cube[np.arange(batch.size), batch.lengths - 1].copy()
            last[:, UNKNOWN] = -np.inf
            top = np.argsort(-last, axis=1, kind="stable")[:, :cfg.k]
            truth = batch.targets[np.arange(batch.size), batch.lengths - 1]
            hits += int((top == truth[:, None]).any(axis=1).sum())
            trips += batch.size
        val_loss, val_recall = _validate(val_batches, params, cfg)
        stats = EpochStats(epoch, loss_sum / steps_sum, hits / trips, val_loss, val_recall,
                           steps_sum)
        history.append(stats)
        logger.info("fold=%d epoch=%d train_loss=%.4f val_loss=%.4f val_recall_at_%d=%.4f",
                    fold, epoch, stats.train_loss, val_loss, cfg.k, val_recall)
        if best is None or val_recall > best.val_recall:
            best, best_params = stats, params
            if ckpt:
                save_checkpoint(ckpt, best_params)
    return FoldResult(fold, best.epoch, best.val_recall, ckpt, history, best_params)


def _validate(batches: Sequence[Batch], params: ModelParams, cfg: TrainConfig):
    weights = bind(params)
    loss_sum, steps, hits, trips = 0.0, 0, 0, 0
    for batch in batches:
        logits = forward_many_to_many(batch, weights, params.config)
        final = batch.final_step_mask()
        # validation loss is the last-step loss, the quantity inference uses
        loss_sum += sequence_loss(logits, batch.targets, final).item() * batch.size
        steps += batch.size
        cube = logits_cube(logits, batch.size)
        last = cube[np.arange(batch.size), batch.lengths - 1].astype(np.float64)
        results = rank(softmax(last), batch.targets[np.arange(batch.size), batch.lengths - 1],
                       cfg.k, exclude=(UNKNOWN,))
        hits += sum(r.hit for r in results)
        trips += batch.size
    return loss_sum / steps, hits / trips


# --------------------------------------------------------------------------
# cross-validation and ensembles


class Ensemble:
    """Models whose final-step pmfs are averaged."""

    def __init__(self, members: Sequence[ModelParams]):
        if not members:
            raise ValueError("empty ensemble")
        cards = {tuple(m.cardinalities) for m in members}
        if len(cards) != 1:
            raise ValueError("ensemble members were trained on different vocabularies")
        self.members = list(members)

    def __len__(self) -> int:
        return len(self.members)

    def predict(self, frames: Sequence[FeatureFrame], batch_size: int = 1024) -> np.ndarray:
        total = None
        for m in self.members:
            p = final_pmfs(frames, m, batch_size)
            total = p if total is None else total + p
        return total / len(self.members)


def ensemble_predict(frame: FeatureFrame, ensemble: Ensemble) -> np.ndarray:
    return ensemble.predict([frame])[0]


@dataclass
class CVResult:
    folds: list[FoldResult]
    failures: dict[int, str]
    ensemble: Ensemble | None
    fold_indices: list[list[int]]


def _run_fold(args):
    (fold, train_frames, val_frames, model_config, train_config, cardinalities, out_dir) = args
    fold_dir = None if out_dir is None else Path(out_dir) / f"fold{fold}"
    return train_fold(train_frames, val_frames, model_config, train_config, cardinalities,
                      fold, fold_dir)


def cross_validate(frames: Sequence[FeatureFrame], model_config: ModelConfig,
                   train_config: TrainConfig, cardinalities: Sequence[int],
                   out_dir: str | os.PathLike | None = None, jobs: int = 1) -> CVResult:
    """Train one model per stratified fold; failed folds are reported, not fatal."""
    folds = stratified_kfold(frames, train_config.folds, train_config.seed)
    tasks = []
    for i, val_idx in enumerate(folds):
        held = set(val_idx)
        train = [f for j, f in enumerate(frames) if j not in held]
        val = [frames[j] for j in val_idx]
        tasks.append((i, train, val, model_config, train_config, cardinalities, out_dir))

    results: list[FoldResult] = []
    failures: dict[int, str] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold, t) for t in tasks]
            outcomes = []
            for i, fut in enumerate(futures):
                try:
                    outcomes.append(fut.result())
                except Exception as err:  # noqa: BLE001 - report per fold
                    failures[i] = f"{type(err).__name__}: {err}"
            results = outcomes
    else:
        for t in tasks:
            try:
                results.append(_run_fold(t))
            except Exception as err:  # noqa: BLE001 - report per fold
                logger.error("fold %d failed: %s", t[0], err)
                failures[t[0]] = f"{type(err).__name__}: {err}"
    ensemble = Ensemble([r.params for r in results]) if results else None
    return CVResult(results, failures, ensemble, folds)
