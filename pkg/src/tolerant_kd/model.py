"""MLP classifier, SGD with Nesterov momentum, and checkpoint files."""
from dataclasses import asdict, dataclass, field
import json
import struct
import zlib

import numpy as np

from .core import DimensionError, Tensor, matmul, relu

CHECKPOINT_MAGIC = b"TKDCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError(f"need input_dim >= 1 and at least one positive hidden layer: {self}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["input_dim"]), tuple(d["hidden_dims"]), int(d["num_classes"]), int(d["seed"]))


@dataclass
class ModelParams:
    """Per-layer weights (fan_in x fan_out) and biases, as leaf tensors."""

    spec: MlpSpec
    weights: list
    biases: list

    def tensors(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return ModelParams(
            self.spec,
            [Tensor(w.data, requires_grad=True) for w in self.weights],
            [Tensor(b.data, requires_grad=True) for b in self.biases],
        )

    def flat(self):
        return np.concatenate([t.data.ravel() for t in self.tensors()])

    def equals(self, other):
        """Bit-exact comparison, including signed zeros."""
        if self.spec != other.spec:
            return False
        return self.flat().tobytes() == other.flat().tobytes()


def init_params(spec):
    """Uniform fan-in init with bound sqrt(6 / fan_in); zero biases.

    The weight standard deviation is sqrt(2 / fan_in), the ReLU-preserving
    scale. Only ``spec.seed`` feeds the generator.
    """
    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    dims = spec.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return ModelParams(spec, weights, biases)


def init_std(fan_in):
    return float(np.sqrt(2.0 / fan_in))


def _check_batch(params, batch):
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise DimensionError(
            f"batch shape {list(x.shape)} does not match input_dim {params.spec.input_dim}"
        )
    return batch if isinstance(batch, Tensor) else Tensor(x)


def penultimate_features(params, batch):
    """Post-activation output of the last hidden layer."""
    h = _check_batch(params, batch)
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = relu(matmul(h, w) + b)
    return h


def forward(params, batch):
    """Raw logits, shape [B, C]."""
    h = penultimate_features(params, batch)
    return matmul(h, params.weights[-1]) + params.biases[-1]


def predict_logits(params, x):
    """Off-tape forward on a plain array."""
    return forward(params, np.asarray(x, dtype=np.float64)).data


@dataclass(frozen=True)
class SgdConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 128
    lr_milestones: tuple = (100, 150)
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.base_lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError(f"invalid SGD hyper-parameters: {self}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_factor <= 0:
            raise ValueError(f"invalid SGD schedule: {self}")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs or m < 0 for m in ms):
            raise ValueError(f"milestones must be strictly increasing and < epochs: {ms}")

    @classmethod
    def for_epochs(cls, epochs, **kw):
        """Default schedule: decay by 10x at 50% and 75% of training."""
        return cls(epochs=epochs, lr_milestones=(epochs // 2, (3 * epochs) // 4), **kw)

    def lr_at(self, epoch):
        passed = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.base_lr * self.lr_decay_factor**passed

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "lr_milestones": tuple(d["lr_milestones"])})


@dataclass
class SgdState:
    velocity: list = field(default_factory=list)


def sgd_step(params, grads, state, cfg, epoch):
    """One in-place update of ``params``.

    ``grads`` is a list aligned with ``params.tensors()``. Weight decay is
    coupled: ``g + weight_decay * theta`` enters the momentum buffer.
    """
    lr = cfg.lr_at(epoch)
    tensors = params.tensors()
    if not state.velocity:
        state.velocity = [np.zeros_like(t.data) for t in tensors]
    mu = cfg.momentum
    for t, g, v in zip(tensors, grads, state.velocity):
        if cfg.weight_decay:
            g = g + cfg.weight_decay * t.data
        if mu:
            v *= mu
            v += g
            step = g + mu * v if cfg.nesterov else v
        else:
            step = g
        t.data -= lr * step


def save_checkpoint(path, params, generation_index=0, epoch=0, kind="last"):
    if kind not in ("best", "last"):
        raise ValueError(f"checkpoint kind must be 'best' or 'last', got {kind!r}")
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "spec": params.spec.to_dict(),
            "seed": params.spec.seed,
            "generation_index": int(generation_index),
            "epoch": int(epoch),
            "kind": kind,
        },
        sort_keys=True,
    ).encode()
    payload = params.flat().astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(header + payload)))


def read_checkpoint_header(path):
    return _read_checkpoint(path)[0]


def load_checkpoint(path):
    """Returns ``(params, header)``."""
    header, payload = _read_checkpoint(path)
    spec = MlpSpec.from_dict(header["spec"])
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    dims = spec.layer_dims
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if flat.size != expected:
        raise CheckpointError(f"{path}: payload has {flat.size} values, spec needs {expected}")
    weights, biases, at = [], [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = flat[at : at + fan_in * fan_out].reshape(fan_in, fan_out)
        at += fan_in * fan_out
        b = flat[at : at + fan_out]
        at += fan_out
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(b, requires_grad=True))
    return ModelParams(spec, weights, biases), header


def _read_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    body = raw[12:-4]
    if len(body) < hlen:
        raise CheckpointError(f"{path}: truncated")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    header = json.loads(body[:hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    return header, body[hlen:]
