"""Many-to-one reference path over every prefix of a trip.

The engine decodes every step of one left-to-right scan.  Here each prefix
is encoded from a zero state by its own step-by-step loop (input projection
per step, all layers per step) and only the last state is decoded.  Both
must agree on outputs, losses and gradients; the cell-step counts differ
as T(T+1)/2 against T per layer.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tc
from .data import Batch, FeatureFrame
from .model import (ModelConfig, ModelParams, OpCounter, bind, decode, embed_step,
                    forward_many_to_many, gru_step, layer_weights, logits_cube, lstm_step)
from .objective import sequence_loss, softmax
from .tensor import Tensor

__all__ = [
    "OpCounter",
    "PrefixOracleReport",
    "EquivalenceFailure",
    "enumerate_prefixes",
    "many_to_one_logits",
    "many_to_one_forward",
    "check_equivalence",
    "benchmark_complexity",
]


class EquivalenceFailure(AssertionError):
    def __init__(self, report: PrefixOracleReport):
        super().__init__(report.failure_message())
        self.report = report


def enumerate_prefixes(frame: FeatureFrame) -> list[FeatureFrame]:
    return [frame.prefix(t) for t in range(1, frame.steps + 1)]


def many_to_one_logits(prefix: FeatureFrame, weights: dict[str, Tensor], config: ModelConfig,
                       counter: OpCounter | None = None) -> Tensor:
    """Encode one prefix from zero state; decode only its final hidden state."""
    H = config.hidden_dim
    layers = [layer_weights(weights, i) for i in range(config.layers)]
    h = [tc.zeros(1, H) for _ in layers]
    c = [tc.zeros(1, H) for _ in layers]
    for t in range(prefix.steps):
        x = embed_step(prefix.features[t:t + 1], weights)
        for i, layer in enumerate(layers):
            if config.cell == "GRU":
                h[i] = gru_step(h[i], x, layer, counter=counter, index=i)
            else:
                h[i], c[i] = lstm_step(h[i], c[i], x, layer, counter=counter, index=i)
            x = h[i]
    return decode(h[-1], weights, config)


def many_to_one_forward(prefix: FeatureFrame, params: ModelParams,
                        counter: OpCounter | None = None) -> np.ndarray:
    """Final-step pmf of a prefix (dropout is never applied here)."""
    logits = many_to_one_logits(prefix, bind(params), params.config, counter)
    return softmax(logits.data[0])


@dataclass
class PrefixOracleReport:
    steps: int
    tolerance: float
    max_dev: list[float]  # per prefix length 1..T
    worst_city: list[int]
    oracle_pmf: np.ndarray  # (T, V)
    engine_pmf: np.ndarray  # (T, V)
    oracle_ops: int  # per layer
    engine_ops: int  # per layer
    oracle_loss: float
    engine_loss: float
    grad_tolerance: float | None = None
    grad_dev: dict[str, float] = field(default_factory=dict)

    @property
    def loss_dev(self) -> float:
        return abs(self.oracle_loss - self.engine_loss)

    @property
    def max_grad_dev(self) -> float:
        return max(self.grad_dev.values(), default=0.0)

    @property
    def failing_steps(self) -> list[int]:
        return [t for t, d in enumerate(self.max_dev) if not d < self.tolerance]

    @property
    def passed(self) -> bool:
        ok = not self.failing_steps and self.loss_dev < self.tolerance
        if self.grad_tolerance is not None:
            ok = ok and self.max_grad_dev < self.grad_tolerance
        return ok

    def failure_message(self) -> str:
        lines = []
        for t in self.failing_steps:
            j = self.worst_city[t]
            lines.append(f"step {t}: city {j} oracle={self.oracle_pmf[t, j]!r} "
                         f"engine={self.engine_pmf[t, j]!r} dev={self.max_dev[t]:.3e}")
        if not self.loss_dev < self.tolerance:
            lines.append(f"loss: oracle={self.oracle_loss!r} engine={self.engine_loss!r}")
        if self.grad_tolerance is not None:
            for name, d in self.grad_dev.items():
                if not d < self.grad_tolerance:
                    lines.append(f"grad {name}: dev={d:.3e}")
        return "; ".join(lines) or "PASS"

    def csv_rows(self) -> list[tuple]:
        return [(self.steps, t + 1, d, self.oracle_ops, self.engine_ops)
                for t, d in enumerate(self.max_dev)]


REPORT_HEADER = ("T", "prefix_t", "max_dev", "oracle_ops", "engine_ops")


def report_csv(reports: Sequence[PrefixOracleReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in reports:
        w.writerows(r.csv_rows())
    return buf.getvalue()


def check_equivalence(frame: FeatureFrame, params: ModelParams, tolerance: float = 1e-9,
                      gradients: bool = False, grad_tolerance: float = 1e-7,
                      oracle_params: ModelParams | None = None,
                      raise_on_failure: bool = False) -> PrefixOracleReport:
    """Compare engine step outputs with independently computed prefix outputs.

    ``oracle_params`` lets a test hand the oracle a deliberately corrupted
    copy.  With ``gradients`` the engine loss gradient is also compared
    against the gradient of the mean per-prefix loss.
    """
    if tc.get_precision() != 64:
        raise tc.ContractError("equivalence checks run at 64-bit precision")
    config = params.config
    oracle_params = oracle_params or params
    T = frame.steps
    batch = Batch.from_frames([frame])

    engine_counter = OpCounter()
    engine_tape = tc.Tape() if gradients else None
    ew = bind(params, engine_tape)
    logits = forward_many_to_many(batch, ew, config, counter=engine_counter)
    engine_loss = sequence_loss(logits, batch.targets, batch.mask)
    engine_pmf = softmax(logits_cube(logits, 1)[0])

    oracle_counter = OpCounter()
    oracle_tape = tc.Tape() if gradients else None
    ow = bind(oracle_params, oracle_tape)
    prefix_losses, oracle_pmf = [], []
    for prefix in enumerate_prefixes(frame):
        out = many_to_one_logits(prefix, ow, config, oracle_counter)
        oracle_pmf.append(softmax(out.data[0]))
        prefix_losses.append(tc.softmax_cross_entropy(out, prefix.targets[-1:], [1.0]))
    total = prefix_losses[0]
    for loss in prefix_losses[1:]:
        total = tc.add(total, loss)
    oracle_loss = tc.scale(total, 1.0 / T)
    oracle_pmf = np.array(oracle_pmf)

    dev = np.abs(oracle_pmf - engine_pmf)
    report = PrefixOracleReport(
        steps=T, tolerance=tolerance,
        max_dev=[float(d) for d in dev.max(axis=1)],
        worst_city=[int(j) for j in dev.argmax(axis=1)],
        oracle_pmf=oracle_pmf, engine_pmf=engine_pmf,
        oracle_ops=oracle_counter.per_layer(0), engine_ops=engine_counter.per_layer(0),
        oracle_loss=oracle_loss.item(), engine_loss=engine_loss.item(),
    )
    if gradients:
        eg = engine_tape.backward(engine_loss)
        og = oracle_tape.backward(oracle_loss)
        report.grad_tolerance = grad_tolerance
        report.grad_dev = {k: float(np.abs(eg[k] - og[k]).max()) for k in eg}
    if raise_on_failure and not report.passed:
        raise EquivalenceFailure(report)
    return report


@dataclass
class BenchmarkRow:
    steps: int
    oracle_ops: int
    engine_ops: int
    oracle_seconds: float
    engine_seconds: float

    @property
    def op_ratio(self) -> float:
        return self.oracle_ops / self.engine_ops

    @property
    def time_ratio(self) -> float:
        return self.oracle_seconds / self.engine_seconds if self.engine_seconds else float("inf")


def benchmark_complexity(lengths: Sequence[int], params: ModelParams, repetitions: int = 3,
                         seed: int = 0) -> list[BenchmarkRow]:
    """Time all-prefix outputs of random trips via both paths (forward only)."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    config = params.config
    weights = bind(params)
    rows = []
    for T in lengths:
        frame = random_frame(T, params.cardinalities, rng)
        batch = Batch.from_frames([frame])
        engine_times, oracle_times = [], []
        for _ in range(repetitions):
            engine_counter = OpCounter()
            start = time.perf_counter()
            forward_many_to_many(batch, weights, config, counter=engine_counter)
            engine_times.append(time.perf_counter() - start)

            oracle_counter = OpCounter()
            start = time.perf_counter()
            for prefix in enumerate_prefixes(frame):
                many_to_one_logits(prefix, weights, config, oracle_counter)
            oracle_times.append(time.perf_counter() - start)
        rows.append(BenchmarkRow(T, oracle_counter.per_layer(0), engine_counter.per_layer(0),
                                 statistics.median(oracle_times),
                                 statistics.median(engine_times)))
    return rows


def random_frame(steps: int, cardinalities: Sequence[int], rng: np.random.Generator,
                 utrip_id: str = "random") -> FeatureFrame:
    feats = np.stack([rng.integers(0, c, size=steps) for c in cardinalities], axis=1)
    targets = rng.integers(0, cardinalities[0], size=steps)
    return FeatureFrame(utrip_id, feats.astype(np.int64), targets.astype(np.int64),
                        np.ones(steps, dtype=bool))


def random_params(config: ModelConfig, cardinalities: Sequence[int],
                  rng: np.random.Generator, scale: float = 0.5) -> ModelParams:
    """Parameters drawn uniformly in +-scale (larger than training init, so
    every gate operates away from its linear regime)."""
    base = ModelParams.init(config, cardinalities, rng)
    arrays = {k: rng.uniform(-scale, scale, v.shape).astype(tc.get_dtype())
              for k, v in base.arrays.items()}
    return ModelParams(config, cardinalities, arrays)
