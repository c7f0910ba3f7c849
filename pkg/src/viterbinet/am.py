"""Feed-forward acoustic model: spliced frames -> ReLU layers -> log-softmax."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .loss import log_softmax

CHECKPOINT_MAGIC = b"VNAM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AmConfig:
    input_dim: int = 75
    splice_left: int = 5
    splice_right: int = 5
    hidden_layers: int = 2
    hidden_units: int = 64
    num_pdfs: int = 1
    activation: str = "relu"

    def __post_init__(self):
        for name in ("input_dim", "splice_left", "splice_right", "hidden_layers", "hidden_units"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.num_pdfs < 1:
            raise ValueError("num_pdfs must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @classmethod
    def full_scale(cls, input_dim: int = 75, num_pdfs: int = 1256) -> "AmConfig":
        return cls(input_dim, 5, 5, 5, 640, num_pdfs)

    @property
    def spliced_dim(self) -> int:
        return self.input_dim * (self.splice_left + self.splice_right + 1)

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.spliced_dim] + [self.hidden_units] * self.hidden_layers + [self.num_pdfs]
        return list(zip(dims[1:], dims[:-1]))


class AmModel:
    """Weights are stored as (out, in) matrices, applied to row-vector frames."""

    def __init__(self, config: AmConfig, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.config = config
        self.weights = weights
        self.biases = biases
        shapes = config.layer_shapes()
        if [w.shape for w in weights] != shapes or [b.shape for b in biases] != [(o,) for o, _ in shapes]:
            raise ValueError("parameter shapes do not match the config")

    @classmethod
    def init(cls, config: AmConfig, seed: int = 0) -> "AmModel":
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_out, fan_in in config.layer_shapes():
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(config, weights, biases)

    @classmethod
    def zeros(cls, config: AmConfig) -> "AmModel":
        return cls(config, [np.zeros(s) for s in config.layer_shapes()],
                   [np.zeros(o) for o, _ in config.layer_shapes()])

    @classmethod
    def passthrough(cls, config: AmConfig, shift: float = 50.0) -> "AmModel":
        """A model whose output equals log_softmax of the centre input frame.

        Needs ``input_dim == num_pdfs`` and ``hidden_units >= input_dim``.
        Hidden layers carry the input shifted by ``shift`` so ReLU stays linear
        for inputs above ``-shift``.  Used as a stand-in "pretrained" model
        when features are themselves log posteriors.
        """
        D, P = config.input_dim, config.num_pdfs
        if D != P:
            raise ValueError("passthrough needs input_dim == num_pdfs")
        if config.hidden_layers and config.hidden_units < D:
            raise ValueError("passthrough needs hidden_units >= input_dim")
        m = cls.zeros(config)
        centre = config.splice_left * D
        for k, w in enumerate(m.weights):
            rows = np.arange(D)
            cols = rows + centre if k == 0 else rows
            w[rows, cols] = 1.0
        if config.hidden_layers:
            m.biases[0][:D] = shift
            m.biases[-1][:] = -shift
        return m

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "AmModel":
        return AmModel(self.config, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, vec: np.ndarray) -> None:
        k = 0
        for p in self.params():
            p[...] = vec[k:k + p.size].reshape(p.shape)
            k += p.size

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return am_forward(self, splice(features, self.config.splice_left, self.config.splice_right))[0]


def splice(features: np.ndarray, left: int, right: int) -> np.ndarray:
    """Stack frames t-left .. t+right per row, replicating the edge frames."""
    features = np.asarray(features, dtype=np.float64)
    T = features.shape[0]
    if T < 1:
        raise ValueError("need at least one frame")
    offsets = np.arange(-left, right + 1)
    idx = np.clip(np.arange(T)[:, None] + offsets[None, :], 0, T - 1)
    return features[idx].reshape(T, -1)


def am_forward(m: AmModel, spliced: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns (T x P log posteriors, cache of layer inputs and pre-activations)."""
    if spliced.ndim != 2 or spliced.shape[1] != m.config.spliced_dim:
        raise ValueError(f"input shape {spliced.shape} does not match spliced dim {m.config.spliced_dim}")
    h = spliced
    cache = [h]
    for w, b in zip(m.weights[:-1], m.biases[:-1]):
        z = h @ w.T + b
        h = np.maximum(z, 0.0)
        cache += [z, h]
    logits = h @ m.weights[-1].T + m.biases[-1]
    return log_softmax(logits, axis=1), cache


def am_backward(m: AmModel, cache: list[np.ndarray], d_logits: np.ndarray) -> list[np.ndarray]:
    """Gradients in :meth:`AmModel.params` order (w0, b0, w1, b1, ...)."""
    grads: list[np.ndarray] = []
    delta = d_logits
    n = len(m.weights)
    for k in range(n - 1, -1, -1):
        h_in = cache[2 * k]
        grads = [delta.T @ h_in, delta.sum(axis=0)] + grads
        if k > 0:
            z = cache[2 * k - 1]
            delta = (delta @ m.weights[k]) * (z > 0)
    return grads


# ---------------------------------------------------------------------------
# checkpoint: magic, u32 version, u32 header length, JSON config header,
# then float64 little-endian parameter blocks in params() order


def dump_am(m: AmModel) -> bytes:
    header = json.dumps(asdict(m.config), sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in m.params())
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + body


def load_am(data: bytes) -> AmModel:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an acoustic model checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = AmConfig(**json.loads(data[12:12 + hlen]))
    m = AmModel.zeros(config)
    flat = np.frombuffer(data[12 + hlen:], dtype="<f8")
    if flat.size != sum(p.size for p in m.params()):
        raise ValueError("checkpoint body size does not match its config")
    m.set_flat(flat.astype(np.float64))
    return m


def save_am(m: AmModel, path) -> None:
    with open(path, "wb") as f:
        f.write(dump_am(m))


def read_am(path) -> AmModel:
    with open(path, "rb") as f:
        return load_am(f.read())
