"""
Graphical autoencoder over registered meshes.

A registered mesh is flattened to (x1, y1, z1, x2, ...) in metres and pushed
through an hour-glass perceptron: encoder input -> 256 -> 64 -> 16 -> d and
decoder d -> 16 -> 64 -> 256 -> input. Hidden layers are ReLU, the last layer
of the encoder and of the decoder is linear. Training minimises the mean
squared coordinate error with RMSprop.

Everything is plain numpy with explicit backpropagation so gradients can be
checked against finite differences and runs are bit-reproducible per seed.
"""

import struct
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from body_mesh import RegisteredMesh
from errors import ConfigError, DataError

ACTIVATIONS = ("relu", "linear")
MAGIC = b"GAE1"

Gradients = List[Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")


@dataclass
class Layer:
    spec: LayerSpec
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray    # (out_dim,)

    @property
    def relu(self) -> bool:
        return self.spec.activation == "relu"


@dataclass
class AutoencoderModel:
    encoder: List[Layer]
    decoder: List[Layer]
    input_mean: np.ndarray
    embedding_mean: Optional[np.ndarray] = None
    embedding_sd: Optional[np.ndarray] = None

    def __post_init__(self):
        self.validate()

    @property
    def layers(self) -> List[Layer]:
        return self.encoder + self.decoder

    @property
    def input_dim(self) -> int:
        return self.encoder[0].spec.in_dim

    @property
    def embedding_dim(self) -> int:
        return self.encoder[-1].spec.out_dim

    @property
    def hidden(self) -> Tuple[int, ...]:
        return tuple(layer.spec.out_dim for layer in self.encoder[:-1])

    def validate(self) -> None:
        if not self.encoder or not self.decoder:
            raise ConfigError("autoencoder needs at least one encoder and one decoder layer")
        layers = self.layers
        for a, b in zip(layers, layers[1:]):
            if a.spec.out_dim != b.spec.in_dim:
                raise ConfigError(f"layer chain broken: {a.spec.out_dim} -> {b.spec.in_dim}")
        for layer in layers:
            if layer.weight.shape != (layer.spec.in_dim, layer.spec.out_dim) or layer.bias.shape != (layer.spec.out_dim,):
                raise ConfigError(f"parameter shapes do not match {layer.spec}")
        if self.encoder[-1].relu or self.decoder[-1].relu:
            raise ConfigError("terminal encoder and decoder layers must be linear")
        if self.decoder[-1].spec.out_dim != self.input_dim:
            raise ConfigError("decoder output must match input dimension")
        if self.input_mean.shape != (self.input_dim,):
            raise ConfigError("input centering vector has the wrong length")

    def copy(self) -> "AutoencoderModel":
        def clone(layers: List[Layer]) -> List[Layer]:
            return [Layer(layer.spec, layer.weight.copy(), layer.bias.copy()) for layer in layers]

        return AutoencoderModel(
            clone(self.encoder), clone(self.decoder), self.input_mean.copy(),
            None if self.embedding_mean is None else self.embedding_mean.copy(),
            None if self.embedding_sd is None else self.embedding_sd.copy(),
        )


@dataclass(frozen=True)
class TrainConfig:
    d: int = 3
    epochs: int = 500
    batch_size: int = 100
    learning_rate: float = 1e-3
    rms_decay: float = 0.9
    rms_epsilon: float = 1e-8
    split_fraction: float = 0.8
    seed: int = 0
    hidden: Tuple[int, ...] = (256, 64, 16)

    def validate(self) -> "TrainConfig":
        if self.d < 1:
            raise ConfigError(f"train.d must be >= 1, got {self.d}")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f"train.split_fraction must be in (0, 1), got {self.split_fraction}")
        if not (self.learning_rate > 0 and 0.0 <= self.rms_decay < 1.0 and self.rms_epsilon >= 0):
            raise ConfigError("RMSprop needs learning_rate > 0, 0 <= rms_decay < 1, rms_epsilon >= 0")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be >= 1")
        if self.seed < 0:
            raise ConfigError("train.seed must be >= 0")
        return self


@dataclass
class TrainHistory:
    train_mse: List[float] = field(default_factory=list)
    val_mse: List[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "epoch": np.arange(1, len(self.train_mse) + 1),
            "train_mse": self.train_mse,
            "val_mse": self.val_mse,
        })


@dataclass
class Embedding:
    ids: np.ndarray
    raw: np.ndarray
    standardized: np.ndarray
    mean: np.ndarray
    sd: np.ndarray

    @property
    def d(self) -> int:
        return self.raw.shape[1]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"id": self.ids})
        for k in range(self.d):
            frame[f"P{k + 1}_raw"] = self.raw[:, k]
        for k in range(self.d):
            frame[f"P{k + 1}"] = self.standardized[:, k]
        return frame


# ---------------------------------------------------------------------------
# Mesh <-> vector
# ---------------------------------------------------------------------------

def flatten(mesh: RegisteredMesh) -> np.ndarray:
    """(x1, y1, z1, x2, ...) in metres"""
    return mesh.vertices.reshape(-1) / 1000.0


def unflatten(vector: np.ndarray, faces: np.ndarray) -> RegisteredMesh:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size % 3:
        raise DataError(f"cannot unflatten a vector of shape {vector.shape}")
    return RegisteredMesh(vector.reshape(-1, 3) * 1000.0, faces)


def dataset_matrix(vertices: Union[np.ndarray, Sequence[RegisteredMesh]]) -> np.ndarray:
    """Stack meshes (or an (N, V, 3) vertex array in mm) into an (N, 3V) matrix in metres"""
    if isinstance(vertices, np.ndarray):
        if vertices.ndim != 3 or vertices.shape[2] != 3:
            raise DataError(f"expected (N, V, 3) vertices, got {vertices.shape}")
        return vertices.reshape(len(vertices), -1) / 1000.0
    return np.stack([flatten(m) for m in vertices]) if len(vertices) else np.empty((0, 0))


# ---------------------------------------------------------------------------
# Model construction and the forward/backward passes
# ---------------------------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(input_dim: int, d: int, hidden: Sequence[int] = (256, 64, 16), seed=0,
               input_mean: Optional[np.ndarray] = None) -> AutoencoderModel:
    """Glorot-uniform weights, zero biases; decoder widths mirror the encoder"""
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden, d]

    def build(dims: List[int]) -> List[Layer]:
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            activation = "linear" if i == len(dims) - 2 else "relu"
            layers.append(Layer(LayerSpec(a, b, activation), _glorot(rng, a, b), np.zeros(b)))
        return layers

    encoder = build(widths)
    decoder = build(widths[::-1])
    mean = np.zeros(input_dim) if input_mean is None else np.asarray(input_mean, dtype=np.float64)
    return AutoencoderModel(encoder, decoder, mean)


def _as_batch(model: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    batch = x[None, :] if x.ndim == 1 else x
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise DataError(f"input has {batch.shape[-1]} coordinates, model expects {model.input_dim}")
    return batch


def _forward_all(model: AutoencoderModel, batch: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    h = batch - model.input_mean
    pre, act = [], [h]
    for layer in model.layers:
        z = h @ layer.weight + layer.bias
        h = np.maximum(z, 0.0) if layer.relu else z
        pre.append(z)
        act.append(h)
    return pre, act


def forward(model: AutoencoderModel, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (embedding, reconstruction) for one vector or a batch of rows"""
    batch = _as_batch(model, x)
    _, act = _forward_all(model, batch)
    embedding = act[len(model.encoder)]
    reconstruction = act[-1] + model.input_mean
    if np.asarray(x).ndim == 1:
        return embedding[0], reconstruction[0]
    return embedding, reconstruction


def encode(model: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    return forward(model, x)[0]


def decode(model: AutoencoderModel, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    h = p[None, :] if p.ndim == 1 else p
    if h.shape[1] != model.embedding_dim:
        raise DataError(f"embedding has {h.shape[1]} components, model expects {model.embedding_dim}")
    for layer in model.decoder:
        z = h @ layer.weight + layer.bias
        h = np.maximum(z, 0.0) if layer.relu else z
    out = h + model.input_mean
    return out[0] if p.ndim == 1 else out


def reconstruction_loss(model: AutoencoderModel, batch: np.ndarray) -> float:
    """Mean squared coordinate error (m^2)"""
    batch = _as_batch(model, batch)
    if len(batch) == 0:
        raise DataError("empty batch")
    _, reconstruction = forward(model, batch)
    return float(np.mean((reconstruction - batch) ** 2))


def gradients(model: AutoencoderModel, batch: np.ndarray) -> Gradients:
    """Analytic (dW, db) for every layer, encoder first. ReLU'(0) = 0."""
    batch = _as_batch(model, batch)
    if len(batch) == 0:
        raise DataError("empty batch")
    pre, act = _forward_all(model, batch)
    residual = act[-1] + model.input_mean - batch
    delta = 2.0 * residual / residual.size
    grads: Gradients = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.relu:
            delta = delta * (pre[i] > 0.0)
        grads.append((act[i].T @ delta, delta.sum(axis=0)))
        if i:
            delta = delta @ layer.weight.T
    grads.reverse()
    return grads


# ---------------------------------------------------------------------------
# RMSprop
# ---------------------------------------------------------------------------

@dataclass
class RMSpropState:
    cache: Gradients

    @classmethod
    def zeros_like(cls, model: AutoencoderModel) -> "RMSpropState":
        return cls([(np.zeros_like(layer.weight), np.zeros_like(layer.bias)) for layer in model.layers])


def rmsprop_step(model: AutoencoderModel, state: RMSpropState, grads: Gradients, lr: float,
                 decay: float = 0.9, epsilon: float = 1e-8) -> Tuple[AutoencoderModel, RMSpropState]:
    """One elementwise RMSprop update, applied in place"""
    if len(grads) != len(model.layers) or len(state.cache) != len(model.layers):
        raise DataError("gradient/state list does not match the model layers")
    for layer, (g_w, g_b), (c_w, c_b) in zip(model.layers, grads, state.cache):
        for param, g, cache in ((layer.weight, g_w, c_w), (layer.bias, g_b, c_b)):
            if g.shape != param.shape:
                raise DataError(f"gradient shape {g.shape} does not match parameter {param.shape}")
            cache *= decay
            cache += (1.0 - decay) * g * g
            param -= lr * g / (np.sqrt(cache) + epsilon)
    return model, state


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_val_split(n: int, split_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row indices of the training and validation groups; depends on (n, fraction, seed) only"""
    if n < 2:
        raise DataError(f"need at least 2 meshes to split, got {n}")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0])).permutation(n)
    n_train = min(max(int(round(split_fraction * n)), 1), n - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def train(data: Union[np.ndarray, Sequence[RegisteredMesh]], config: Optional[TrainConfig] = None,
          verbose: bool = False) -> Tuple[AutoencoderModel, TrainHistory]:
    """Fit an autoencoder on flattened meshes (rows in metres, or meshes)"""
    config = (config or TrainConfig()).validate()
    x = data if isinstance(data, np.ndarray) and data.ndim == 2 else dataset_matrix(data)
    if x.size == 0:
        raise DataError("empty dataset")
    train_idx, val_idx = train_val_split(len(x), config.split_fraction, config.seed)
    x_train, x_val = x[train_idx], x[val_idx]

    model = init_model(x.shape[1], config.d, config.hidden,
                       np.random.SeedSequence([config.seed, 1]),
                       input_mean=x_train.mean(axis=0))
    state = RMSpropState.zeros_like(model)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    history = TrainHistory()

    epochs = tqdm(range(config.epochs), desc=f"🧠 d={config.d}", file=sys.stderr,
                  disable=not verbose, leave=False)
    for _ in epochs:
        order = shuffle_rng.permutation(len(x_train))
        for start in range(0, len(order), config.batch_size):
            batch = x_train[order[start:start + config.batch_size]]
            rmsprop_step(model, state, gradients(model, batch), config.learning_rate,
                         config.rms_decay, config.rms_epsilon)
        history.train_mse.append(reconstruction_loss(model, x_train))
        history.val_mse.append(reconstruction_loss(model, x_val))
        if verbose:
            epochs.set_postfix(train=f"{history.train_mse[-1]:.3e}", val=f"{history.val_mse[-1]:.3e}")
    if verbose:
        print(f"✅ d={config.d}: train MSE {history.train_mse[-1]:.3e} m², "
              f"val MSE {history.val_mse[-1]:.3e} m²", file=sys.stderr)
    return model, history


def _sweep_point(x: np.ndarray, config: TrainConfig) -> dict:
    _, history = train(x, config)
    return {
        "d": config.d,
        "train_mse": history.train_mse[-1],
        "val_mse": history.val_mse[-1],
        "epochs": config.epochs,
        "seed": config.seed,
    }


def dim_sweep(data: Union[np.ndarray, Sequence[RegisteredMesh]], d_values: Sequence[int],
              config: Optional[TrainConfig] = None, n_jobs: int = 1, verbose: bool = False) -> pd.DataFrame:
    """One independent training run per embedding dimension, all on the same split"""
    d_values = [int(d) for d in d_values]
    if not d_values:
        raise DataError("dimension sweep needs at least one d value")
    config = (config or TrainConfig()).validate()
    x = data if isinstance(data, np.ndarray) and data.ndim == 2 else dataset_matrix(data)
    configs = [replace(config, d=d).validate() for d in d_values]
    if verbose:
        print(f"🔬 Dimension sweep over d={d_values} ({config.epochs} epochs each)", file=sys.stderr)
    rows = Parallel(n_jobs=n_jobs)(delayed(_sweep_point)(x, c) for c in configs)
    return pd.DataFrame(rows, columns=["d", "train_mse", "val_mse", "epochs", "seed"])


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

def standardize_embedding(model: AutoencoderModel, raw: np.ndarray,
                          ids: Optional[np.ndarray] = None) -> Embedding:
    """Standardize with cohort constants and remember them on the model"""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or len(raw) < 2:
        raise DataError("need at least two embedded subjects to standardize")
    mean = raw.mean(axis=0)
    sd = raw.std(axis=0, ddof=1)
    sd = np.where(sd > 0, sd, 1.0)
    model.embedding_mean, model.embedding_sd = mean, sd
    ids = np.arange(1, len(raw) + 1) if ids is None else np.asarray(ids)
    return Embedding(ids, raw, (raw - mean) / sd, mean, sd)


def embed_cohort(model: AutoencoderModel, x: np.ndarray, ids: Optional[np.ndarray] = None,
                 use_model_constants: bool = False) -> Embedding:
    """Encode every row; standardize with stored constants or fresh cohort ones"""
    raw = encode(model, x)
    if use_model_constants and model.embedding_mean is not None:
        ids = np.arange(1, len(raw) + 1) if ids is None else np.asarray(ids)
        standardized = (raw - model.embedding_mean) / model.embedding_sd
        return Embedding(ids, raw, standardized, model.embedding_mean, model.embedding_sd)
    return standardize_embedding(model, raw, ids)


@dataclass
class Alignment:
    permutation: np.ndarray   # aligned position i <- source component permutation[i]
    signs: np.ndarray         # indexed by source component
    measure_names: Tuple[str, ...]
    correlations: np.ndarray  # aligned component vs its measure, after sign flip

    def apply(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        return raw[:, self.permutation] * self.signs[self.permutation]


def _corr_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (a.T @ b) / np.outer(na, nb)
    return np.nan_to_num(c)


def align_components(embedding: np.ndarray, measures: Union[np.ndarray, pd.DataFrame],
                     measure_names: Optional[Sequence[str]] = None) -> Alignment:
    """Match components to measures by greedy maximal |correlation| and fix signs.

    Ties go to the lowest component index, then the lowest measure index.
    Aligned positions follow the order of the matched measures.
    """
    embedding = np.asarray(embedding, dtype=np.float64)
    if isinstance(measures, pd.DataFrame):
        measure_names = tuple(measures.columns) if measure_names is None else measure_names
        measures = measures.to_numpy(dtype=np.float64)
    measures = np.asarray(measures, dtype=np.float64)
    d, m = embedding.shape[1], measures.shape[1]
    if m < d:
        raise DataError(f"{d} components but only {m} measures to align them with")
    measure_names = tuple(measure_names) if measure_names is not None else tuple(f"m{j + 1}" for j in range(m))

    corr = _corr_matrix(embedding, measures)
    score = np.abs(corr)
    assigned = {}
    for _ in range(d):
        i, j = np.unravel_index(np.argmax(score), score.shape)
        assigned[j] = i
        score[i, :] = -1.0
        score[:, j] = -1.0
    order = sorted(assigned)
    permutation = np.array([assigned[j] for j in order], dtype=np.int64)
    signs = np.ones(d)
    for j, i in assigned.items():
        if corr[i, j] < 0:
            signs[i] = -1.0
    correlations = np.array([corr[assigned[j], j] * signs[assigned[j]] for j in order])
    return Alignment(permutation, signs, tuple(measure_names[j] for j in order), correlations)


def latent_recovery_r2(embedding: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """R^2 of each target column regressed on all embedding components plus an intercept"""
    embedding = np.asarray(embedding, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
    design = np.column_stack([np.ones(len(embedding)), embedding])
    coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
    residual = targets - design @ coef
    sst = ((targets - targets.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = 1.0 - (residual ** 2).sum(axis=0) / sst
    return np.where(sst > 0, r2, 0.0)


# ---------------------------------------------------------------------------
# GAE1 model files
# ---------------------------------------------------------------------------

def save_model(model: AutoencoderModel, path: Union[str, Path]) -> None:
    """Little-endian: magic, layer counts, (in, out, relu) per layer, then float64 blocks"""
    parts = [MAGIC, struct.pack("<II", len(model.encoder), len(model.decoder))]
    for layer in model.layers:
        parts.append(struct.pack("<III", layer.spec.in_dim, layer.spec.out_dim, int(layer.relu)))
    for layer in model.layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(model.input_mean, dtype="<f8").tobytes())
    standardized = model.embedding_mean is not None
    parts.append(struct.pack("<B", int(standardized)))
    if standardized:
        parts.append(np.ascontiguousarray(model.embedding_mean, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(model.embedding_sd, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: Union[str, Path]) -> AutoencoderModel:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a GAE1 model file")
    offset = 4

    def take(fmt: str) -> tuple:
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise DataError(f"{path}: truncated model file")
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    def take_floats(count: int) -> np.ndarray:
        nonlocal offset
        size = 8 * count
        if offset + size > len(blob):
            raise DataError(f"{path}: truncated model file")
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset += size
        return values

    n_enc, n_dec = take("<II")
    if n_enc < 1 or n_dec < 1:
        raise DataError(f"{path}: model has no encoder or decoder layers")
    specs = []
    for _ in range(n_enc + n_dec):
        a, b, relu = take("<III")
        specs.append(LayerSpec(a, b, "relu" if relu else "linear"))
    layers = []
    for spec in specs:
        weight = take_floats(spec.in_dim * spec.out_dim).reshape(spec.in_dim, spec.out_dim)
        layers.append(Layer(spec, weight, take_floats(spec.out_dim)))
    input_mean = take_floats(specs[0].in_dim)
    (flag,) = take("<B")
    mean = sd = None
    if flag:
        d = specs[n_enc - 1].out_dim
        mean, sd = take_floats(d), take_floats(d)
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return AutoencoderModel(layers[:n_enc], layers[n_enc:], input_mean, mean, sd)
