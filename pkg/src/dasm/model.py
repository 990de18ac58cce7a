"""MLP encoder + two-class head, and the flat checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, ShapeError, Tensor

NORM_EPS = 1e-12


@dataclass
class ModelConfig:
    input_dim: int = 32
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 16
    seed: int = 0
    init_scale: float = 1.0
    zero_head: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        dims = (self.input_dim, *self.hidden, self.feature_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all model dimensions must be >= 1, got {dims}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float) -> np.ndarray:
    s = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class EncoderClassifier:
    """Encoder of affine+ReLU layers ``d -> hidden... -> D`` and an affine head ``D -> 2``."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        dims = (cfg.input_dim, *cfg.hidden, cfg.feature_dim)
        self.layers: list[tuple[Tensor, Tensor]] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = Tensor(_glorot(rng, fan_in, fan_out, cfg.init_scale), requires_grad=True)
            b = Tensor(np.zeros(fan_out), requires_grad=True)
            self.layers.append((w, b))
        if cfg.zero_head:
            hw = np.zeros((cfg.feature_dim, 2))
        else:
            hw = _glorot(rng, cfg.feature_dim, 2, cfg.init_scale)
        self.head = (Tensor(hw, requires_grad=True), Tensor(np.zeros(2), requires_grad=True))
        self.params = Parameters([t for layer in (*self.layers, self.head) for t in layer])
        self.passes = {"forward": 0, "backward": 0}

    def layer_slices(self) -> list[slice]:
        """Flat-vector slices grouping each layer's weight and bias (for filter normalization)."""
        out, i = [], 0
        for w, b in (*self.layers, self.head):
            n = w.size + b.size
            out.append(slice(i, i + n))
            i += n
        return out

    def encode(self, x) -> Tensor:
        h = ad.as_tensor(x)
        if h.data.ndim != 2 or h.shape[1] != self.config.input_dim:
            raise ShapeError(f"expected input of shape [B, {self.config.input_dim}], got {h.shape}")
        for w, b in self.layers:
            h = ad.relu(ad.affine(h, w, b))
        return h

    def forward(self, x) -> tuple[Tensor, Tensor]:
        self.passes["forward"] += 1
        z = self.encode(x)
        logits = ad.affine(z, *self.head)
        return z, logits

    __call__ = forward

    def predict(self, x: np.ndarray, batch: int = 4096) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch):
            h = x[i:i + batch]
            for w, b in self.layers:
                h = np.maximum(h @ w.data + b.data, 0.0)
            out.append(h @ self.head[0].data + self.head[1].data)
        return np.concatenate(out) if out else np.zeros((0, 2))

    def features(self, x: np.ndarray, normalized: bool = True) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for w, b in self.layers:
            h = np.maximum(h @ w.data + b.data, 0.0)
        if normalized:
            h = h / (np.linalg.norm(h, axis=1, keepdims=True) + NORM_EPS)
        return h

    def clone(self) -> "EncoderClassifier":
        other = EncoderClassifier(self.config)
        other.params.assign(self.params.flatten())
        return other


def normalize_rows(z, eps: float = NORM_EPS) -> Tensor:
    """Divide each row by ``||row|| + eps``; zero rows stay zero."""
    z = ad.as_tensor(z)
    norms = ad.reshape(ad.l2norm(z, axis=1), (z.shape[0], 1))
    return ad.div(z, ad.broadcast_to(ad.add(norms, eps), z.shape))


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"DASMCKPT"


def save_checkpoint(path, model: EncoderClassifier, step: int = 0, bank=None) -> None:
    """Layout: magic, u64 header length, JSON header, little-endian float64 payload.

    The payload is the flattened parameters followed (when a center bank is given)
    by the bank's centers in row-major order.
    """
    theta = model.params.flatten()
    header = {"config": model.config.to_dict(), "step": int(step),
              "shapes": [list(t.shape) for t in model.params], "n_params": int(theta.size)}
    payload = [theta]
    if bank is not None:
        header["bank"] = bank.header()
        payload.append(bank.centers.reshape(-1))
    blob = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.concatenate(payload).astype("<f8").tobytes())


def load_checkpoint(path):
    """Return ``(model, header, centers_or_None)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    values = np.frombuffer(raw[16 + n:], dtype="<f8").astype(np.float64)
    cfg = ModelConfig(**header["config"])
    model = EncoderClassifier(cfg)
    k = header["n_params"]
    model.params.assign(values[:k])
    centers = None
    if "bank" in header:
        centers = values[k:].reshape(header["bank"]["shape"])
    return model, header, centers
