"""Embedding concatenation, stacked GRU/LSTM encoder and city decoders."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as tc
from .data import FEATURES, N_FEATURES, Batch
from .tensor import Tensor

CELLS = ("GRU", "LSTM")
DECODERS = ("feedforward", "tied")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    cell: str = "GRU"
    layers: int = 2
    hidden_dim: int = 128
    decoder: str = "tied"
    city_dim: int = 128
    categorical_dim: int = 25
    device_dim: int = 5
    numerical_dim: int = 10
    input_dropout: float = 0.3
    recurrent_dropout: float = 0.1

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ConfigError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.layers < 1:
            raise ConfigError("need at least one recurrent layer")
        if self.decoder == "tied" and self.hidden_dim != self.city_dim:
            raise ConfigError(
                f"tied decoder needs hidden_dim == city_dim ({self.hidden_dim} != {self.city_dim})")
        for p in (self.input_dropout, self.recurrent_dropout):
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"dropout probability {p} outside [0, 1)")

    @property
    def gates(self) -> int:
        return 3 if self.cell == "GRU" else 4

    def feature_dims(self) -> list[int]:
        family = {"city": self.city_dim, "categorical": self.categorical_dim,
                  "device": self.device_dim, "numerical": self.numerical_dim}
        return [family[kind] for _, _, kind in FEATURES]

    @property
    def input_dim(self) -> int:
        return sum(self.feature_dims())

    def without_dropout(self) -> ModelConfig:
        return self.replace(input_dropout=0.0, recurrent_dropout=0.0)

    def replace(self, **changes) -> ModelConfig:
        return ModelConfig(**{**asdict(self), **changes})

    def to_lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in asdict(self).items()]

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> ModelConfig:
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = _coerce(f.type, values[f.name])
        return cls(**kwargs)


def _coerce(kind, raw):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        return str(raw).lower() in ("1", "true", "yes", "on")
    return str(raw)


def _emb_name(feature: str) -> str:
    return f"emb.{feature}"


class ModelParams:
    """Named parameter arrays (theta) plus the config and vocab sizes they fit."""

    def __init__(self, config: ModelConfig, cardinalities: Sequence[int],
                 arrays: dict[str, np.ndarray]):
        if len(cardinalities) != N_FEATURES:
            raise ConfigError(f"need {N_FEATURES} cardinalities, got {len(cardinalities)}")
        self.config = config
        self.cardinalities = [int(c) for c in cardinalities]
        self.arrays = arrays

    @property
    def n_cities(self) -> int:
        return self.cardinalities[0]

    def copy(self) -> ModelParams:
        return ModelParams(self.config, self.cardinalities,
                           {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.config, self.cardinalities,
                           {k: v.astype(dtype) for k, v in self.arrays.items()})

    def count(self) -> int:
        return sum(v.size for v in self.arrays.values())

    @classmethod
    def init(cls, config: ModelConfig, cardinalities: Sequence[int],
             rng: np.random.Generator) -> ModelParams:
        dtype = tc.get_dtype()
        arrays: dict[str, np.ndarray] = {}
        for (name, _, _), card, dim in zip(FEATURES, cardinalities, config.feature_dims()):
            arrays[_emb_name(name)] = rng.uniform(-0.05, 0.05, (card, dim))
        H, G = config.hidden_dim, config.gates
        fan_in = config.input_dim
        for layer in range(config.layers):
            p = f"rnn{layer}."
            arrays[p + "W"] = _uniform(rng, fan_in, (fan_in, G * H))
            if config.cell == "GRU":
                arrays[p + "U_zr"] = _uniform(rng, H, (H, 2 * H))
                arrays[p + "U_n"] = _uniform(rng, H, (H, H))
                arrays[p + "b"] = np.zeros((1, 3 * H))
            else:
                arrays[p + "U"] = _uniform(rng, H, (H, 4 * H))
                b = np.zeros((1, 4 * H))
                b[0, H:2 * H] = 1.0  # forget gate
                arrays[p + "b"] = b
            fan_in = H
        if config.decoder == "feedforward":
            V = cardinalities[0]
            arrays["dec.W"] = _uniform(rng, H, (H, V))
            arrays["dec.b"] = np.zeros((1, V))
        return cls(config, cardinalities, {k: v.astype(dtype) for k, v in arrays.items()})


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def parameter_count(config: ModelConfig, cardinalities: Sequence[int]) -> int:
    """Closed-form parameter count; independent of how many steps are decoded."""
    emb = sum(c * d for c, d in zip(cardinalities, config.feature_dims()))
    H, G = config.hidden_dim, config.gates
    rnn, fan_in = 0, config.input_dim
    for _ in range(config.layers):
        rnn += fan_in * G * H + H * G * H + G * H
        fan_in = H
    dec = H * cardinalities[0] + cardinalities[0] if config.decoder == "feedforward" else 0
    return emb + rnn + dec


def bind(params: ModelParams, tape: tc.Tape | None = None) -> dict[str, Tensor]:
    """Wrap parameter arrays as tensors, registered on ``tape`` when given."""
    if tape is None:
        return {k: Tensor(v) for k, v in params.arrays.items()}
    return {k: tape.watch(v, name=k) for k, v in params.arrays.items()}


# --------------------------------------------------------------------------
# building blocks


class OpCounter:
    """Counts recurrent cell evaluations per layer."""

    def __init__(self):
        self.counts: Counter[int] = Counter()

    def tick(self, layer: int) -> None:
        self.counts[layer] += 1

    def per_layer(self, layer: int = 0) -> int:
        return self.counts[layer]

    def reset(self) -> None:
        self.counts.clear()


def embed_step(indices: np.ndarray, weights: dict[str, Tensor]) -> Tensor:
    """Look up each feature column and concatenate in fixed column order.

    ``indices`` is (rows, 14); each row is one booking step.
    """
    indices = np.asarray(indices)
    if indices.ndim != 2 or indices.shape[1] != N_FEATURES:
        raise tc.DimensionError(f"expected (rows, {N_FEATURES}) indices, got {indices.shape}")
    parts = [tc.gather_rows(weights[_emb_name(name)], indices[:, j])
             for j, (name, _, _) in enumerate(FEATURES)]
    return tc.concat_cols(parts)


def dropout_mask(shape: tuple[int, int], p: float, rng: np.random.Generator) -> Tensor:
    keep = rng.random(shape) >= p
    return tc.constant(keep / (1.0 - p))


def apply_input_dropout(x: Tensor, p: float, train: bool,
                        rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not train or p == 0.0:
        return x
    return tc.mul(x, dropout_mask(x.shape, p, rng))


def gru_cell(h: Tensor, xw: Tensor, layer: dict[str, Tensor], mask: Tensor | None = None,
             counter: OpCounter | None = None, index: int = 0) -> Tensor:
    """GRU update from a precomputed input projection ``xw = xW + b``.

    h' = z*h + (1-z)*n; ``mask`` (variational recurrent dropout) scales h
    wherever it enters a recurrent product.
    """
    H = h.cols
    if xw.cols != 3 * H or xw.rows != h.rows:
        raise tc.DimensionError(f"gru: projection {xw.shape} does not fit state {h.shape}")
    if counter is not None:
        counter.tick(index)
    hm = h if mask is None else tc.mul(h, mask)
    zr = tc.sigmoid(tc.add(tc.slice_cols(xw, 0, 2 * H), tc.matmul(hm, layer["U_zr"])))
    z = tc.slice_cols(zr, 0, H)
    r = tc.slice_cols(zr, H, 2 * H)
    n = tc.tanh(tc.add(tc.slice_cols(xw, 2 * H, 3 * H), tc.matmul(tc.mul(r, hm), layer["U_n"])))
    return tc.add(tc.mul(z, h), tc.mul(tc.one_minus(z), n))


def gru_step(h: Tensor, x: Tensor, layer: dict[str, Tensor], mask: Tensor | None = None,
             counter: OpCounter | None = None, index: int = 0) -> Tensor:
    xw = tc.add_bias(tc.matmul(x, layer["W"]), layer["b"])
    return gru_cell(h, xw, layer, mask, counter, index)


def lstm_cell(h: Tensor, c: Tensor, xw: Tensor, layer: dict[str, Tensor],
              mask: Tensor | None = None, counter: OpCounter | None = None,
              index: int = 0) -> tuple[Tensor, Tensor]:
    """LSTM update from ``xw = xW + b`` with gate blocks ordered i, f, g, o."""
    H = h.cols
    if xw.cols != 4 * H or xw.rows != h.rows or c.shape != h.shape:
        raise tc.DimensionError(f"lstm: projection {xw.shape} does not fit state {h.shape}")
    if counter is not None:
        counter.tick(index)
    hm = h if mask is None else tc.mul(h, mask)
    pre = tc.add(xw, tc.matmul(hm, layer["U"]))
    gates = tc.sigmoid(tc.slice_cols(pre, 0, 2 * H))
    i, f = tc.slice_cols(gates, 0, H), tc.slice_cols(gates, H, 2 * H)
    g = tc.tanh(tc.slice_cols(pre, 2 * H, 3 * H))
    o = tc.sigmoid(tc.slice_cols(pre, 3 * H, 4 * H))
    c_next = tc.add(tc.mul(f, c), tc.mul(i, g))
    return tc.mul(o, tc.tanh(c_next)), c_next


def lstm_step(h: Tensor, c: Tensor, x: Tensor, layer: dict[str, Tensor],
              mask: Tensor | None = None, counter: OpCounter | None = None,
              index: int = 0) -> tuple[Tensor, Tensor]:
    xw = tc.add_bias(tc.matmul(x, layer["W"]), layer["b"])
    return lstm_cell(h, c, xw, layer, mask, counter, index)


def layer_weights(weights: dict[str, Tensor], layer: int) -> dict[str, Tensor]:
    prefix = f"rnn{layer}."
    return {k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)}


# --------------------------------------------------------------------------
# full passes


def encode_session(batch: Batch, weights: dict[str, Tensor], config: ModelConfig,
                   train: bool = False, rng: np.random.Generator | None = None,
                   counter: OpCounter | None = None) -> list[list[Tensor]]:
    """Scan every layer left to right over the padded batch.

    Returns ``states[layer][t]`` (B x hidden).  Each layer runs exactly
    ``max_steps`` cell evaluations whatever the batch width.  Input dropout
    is drawn independently per step; the recurrent mask once per sequence
    and layer.
    """
    if train and rng is None:
        raise tc.ContractError("training mode needs a dropout rng")
    B, T = batch.size, batch.max_steps
    H = config.hidden_dim
    # time-major rows: row t*B + b
    x = embed_step(batch.features.transpose(1, 0, 2).reshape(T * B, N_FEATURES), weights)
    x = apply_input_dropout(x, config.input_dropout, train, rng)
    states = []
    for index in range(config.layers):
        layer = layer_weights(weights, index)
        xw = tc.add_bias(tc.matmul(x, layer["W"]), layer["b"])
        mask = None
        if train and config.recurrent_dropout > 0:
            mask = dropout_mask((B, H), config.recurrent_dropout, rng)
        h = tc.zeros(B, H)
        c = tc.zeros(B, H)
        outs = []
        for t in range(T):
            xw_t = xw if T == 1 else tc.slice_rows(xw, t * B, (t + 1) * B)
            if config.cell == "GRU":
                h = gru_cell(h, xw_t, layer, mask, counter, index)
            else:
                h, c = lstm_cell(h, c, xw_t, layer, mask, counter, index)
            outs.append(h)
        states.append(outs)
        x = tc.stack_rows(outs) if T > 1 else outs[0]
    return states


def decode(h: Tensor, weights: dict[str, Tensor], config: ModelConfig,
           city_table_t: Tensor | None = None) -> Tensor:
    """Map hidden states (rows) to city logits."""
    if config.decoder == "tied":
        table_t = city_table_t if city_table_t is not None else tc.transpose(weights["emb.city"])
        return tc.matmul(h, table_t)
    return tc.add_bias(tc.matmul(h, weights["dec.W"]), weights["dec.b"])


def forward_many_to_many(batch: Batch, weights: dict[str, Tensor], config: ModelConfig,
                         train: bool = False, rng: np.random.Generator | None = None,
                         counter: OpCounter | None = None) -> Tensor:
    """Logits at every step, shape (max_steps * B, n_cities), time-major rows."""
    states = encode_session(batch, weights, config, train, rng, counter)
    top = states[-1]
    return decode(tc.stack_rows(top) if len(top) > 1 else top[0], weights, config)


def logits_cube(logits: Tensor | np.ndarray, batch_size: int) -> np.ndarray:
    """Reshape time-major 2-D logits to (B, T, V)."""
    arr = logits.data if isinstance(logits, Tensor) else logits
    T = arr.shape[0] // batch_size
    return arr.reshape(T, batch_size, -1).transpose(1, 0, 2)
