"""Feed-forward softmax policy trained by supervised cross-entropy, in plain numpy."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, CheckpointVersionError, ContractViolation

LAYERS = (324, 300, 300, 112)
MAGIC = b"TOPOCEM-NET\0"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainingPair:
    observation: np.ndarray
    action: int


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class PolicyNet:
    """ReLU MLP with a softmax head and a frozen per-feature input normalization.

    ``weights[i]`` has shape ``(dims[i], dims[i + 1])``.
    """

    def __init__(self, dims, weights, biases, mean=None, scale=None):
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ContractViolation(f"invalid layer dimensions {self.dims}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i], self.dims[i + 1]) or b.shape != (self.dims[i + 1],):
                raise ContractViolation(f"layer {i} has shape {w.shape}/{b.shape}, "
                                        f"expected dims {self.dims}")
        n_in = self.dims[0]
        self.mean = np.zeros(n_in) if mean is None else np.asarray(mean, dtype=np.float64)
        self.scale = np.ones(n_in) if scale is None else np.asarray(scale, dtype=np.float64)
        if self.mean.shape != (n_in,) or self.scale.shape != (n_in,) or np.any(self.scale <= 0):
            raise ContractViolation("normalization vectors must match the input size, scale > 0")
        self.normalized = mean is not None

    @classmethod
    def initialize(cls, dims=LAYERS, seed: int = 0, zero: bool = False) -> "PolicyNet":
        """Uniform fan-in scaled weights, zero biases; ``zero=True`` gives the all-zero net."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            if zero:
                weights.append(np.zeros((fan_in, fan_out)))
            else:
                limit = np.sqrt(3.0 / fan_in)
                weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(dims, weights, biases)

    @property
    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "PolicyNet":
        net = PolicyNet(self.dims, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.mean.copy(), self.scale.copy())
        net.normalized = self.normalized
        return net

    def fit_normalization(self, observations: np.ndarray, passthrough=()) -> None:
        """Freeze mean/scale from a batch; ``passthrough`` slices stay unscaled."""
        x = np.asarray(observations, dtype=np.float64).reshape(-1, self.dims[0])
        if x.shape[0] == 0:
            raise ContractViolation("cannot fit normalization on an empty batch")
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        scale = np.where(std > 1e-8, std, 1.0)
        for sl in passthrough:
            mean[sl], scale[sl] = 0.0, 1.0
        self.mean, self.scale, self.normalized = mean, scale, True

    def _prepare(self, observations) -> np.ndarray:
        x = np.asarray(observations, dtype=np.float64)
        if x.shape[-1] != self.dims[0]:
            raise ContractViolation(f"observation length {x.shape[-1]}, expected {self.dims[0]}")
        if np.isnan(x).any():
            raise ContractViolation("observation contains NaN")
        return (x - self.mean) / self.scale

    def _activations(self, x: np.ndarray) -> list[np.ndarray]:
        acts = [x]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(z if i == last else np.maximum(z, 0.0))
        return acts

    def logits(self, observations) -> np.ndarray:
        return self._activations(self._prepare(observations))[-1]

    def forward(self, observations) -> np.ndarray:
        """Action probabilities for one observation (1-D) or a batch (2-D)."""
        return softmax(self.logits(observations))

    def loss_and_grads(self, observations, actions) -> tuple[float, list[np.ndarray]]:
        """Mean cross-entropy and its gradient, ordered like ``params``."""
        x = self._prepare(np.atleast_2d(observations))
        y = np.asarray(actions, dtype=np.int64).reshape(-1)
        if x.shape[0] != y.shape[0] or x.shape[0] == 0:
            raise ContractViolation("observations and actions must be non-empty and aligned")
        if y.min() < 0 or y.max() >= self.dims[-1]:
            raise ContractViolation("action index outside the output layer")
        acts = self._activations(x)
        z = acts[-1]
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        m = x.shape[0]
        loss = float(-logp[np.arange(m), y].mean())
        delta = np.exp(logp)
        delta[np.arange(m), y] -= 1.0
        delta /= m
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0)
        return loss, gw + gb


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: list[np.ndarray] | None = None

    def step(self, params, grads, lr: float) -> None:
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v -= lr * g
            p += v


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads, lr: float) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str):
    if name == "sgd":
        return SGD()
    if name == "adam":
        return Adam()
    raise ContractViolation(f"unknown optimizer {name!r}")


def train_step(net: PolicyNet, pairs, learning_rate: float, optimizer=None) -> float:
    """One update over ``pairs``; returns the loss before the update.

    Without an optimizer the update is a plain gradient step.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractViolation("train_step needs at least one pair")
    obs = np.stack([np.asarray(p.observation if isinstance(p, TrainingPair) else p[0])
                    for p in pairs])
    act = np.array([p.action if isinstance(p, TrainingPair) else p[1] for p in pairs])
    return train_arrays(net, obs, act, learning_rate, optimizer)


def train_arrays(net: PolicyNet, observations, actions, learning_rate: float,
                 optimizer=None) -> float:
    loss, grads = net.loss_and_grads(observations, actions)
    if learning_rate == 0:
        return loss
    params = net.params
    if optimizer is None:
        for p, g in zip(params, grads):
            p -= learning_rate * g
    else:
        optimizer.step(params, grads, learning_rate)
    if not all(np.isfinite(p).all() for p in params):
        raise ContractViolation("non-finite weights after update")
    return loss


def save_checkpoint(net: PolicyNet, path: str | Path) -> None:
    dims = net.dims
    parts = [MAGIC, struct.pack("<B", FORMAT_VERSION), struct.pack("<I", len(dims)),
             struct.pack(f"<{len(dims)}I", *dims), struct.pack("<B", int(net.normalized))]
    for arr in (net.mean, net.scale, *net.weights, *net.biases):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, expected_dims=None) -> PolicyNet:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    off = len(MAGIC)
    if data[:off] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a policy checkpoint")
    if len(data) < off + 5:
        raise CheckpointFormatError(f"{path}: truncated header")
    version = data[off]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, "
                                     f"this build reads {FORMAT_VERSION}")
    (n_dims,) = struct.unpack_from("<I", data, off + 1)
    off += 5
    if not 2 <= n_dims <= 64 or len(data) < off + 4 * n_dims + 1:
        raise CheckpointFormatError(f"{path}: truncated or corrupt dimension list")
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims
    normalized = bool(data[off])
    off += 1
    if expected_dims is not None and tuple(dims) != tuple(expected_dims):
        raise CheckpointFormatError(f"{path}: dimensions {dims}, expected {tuple(expected_dims)}")
    shapes = [(dims[0],), (dims[0],)]
    shapes += [(a, b) for a, b in zip(dims[:-1], dims[1:])]
    shapes += [(b,) for b in dims[1:]]
    need = 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) - off != need:
        raise CheckpointFormatError(f"{path}: expected {need} bytes of parameters, "
                                    f"found {len(data) - off}")
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off)
                      .astype(np.float64).reshape(shape))
        off += 8 * count
    k = len(dims) - 1
    try:
        net = PolicyNet(dims, arrays[2:2 + k], arrays[2 + k:], arrays[0], arrays[1])
    except ContractViolation as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from exc
    net.normalized = normalized
    return net
