"""Desk-scale classifiers: an MLP and a small CNN.

Initialization is a pure function of the config: fan-in-scaled uniform
weights from a seeded generator, zero biases. Pixel inputs arrive in
[0, 255] and are scaled to [0, 1] at the model boundary; transforms work
in [0, 255] upstream.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import ParamSet

__all__ = ["ModelConfig", "Model", "build_model", "task_loss",
           "save_checkpoint", "load_checkpoint"]

_CKPT_MAGIC = b"MDLCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "smallcnn"  # "mlp" | "smallcnn"
    input_shape: tuple = (3, 28, 28)  # (C, H, W)
    classes: int = 10
    hidden: tuple = (128,)  # mlp hidden sizes
    channels: tuple = (16, 32)  # smallcnn conv channel plan
    dense: int = 64  # smallcnn penultimate width
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("mlp", "smallcnn"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if any(d <= 0 for d in self.input_shape) or len(self.input_shape) != 3:
            raise ValueError("input_shape must be (C, H, W) with positive dims")


def _uniform(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / np.sqrt(fan_in)
    return T.Tensor(
        rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True
    )


def _zeros(shape, dtype=np.float32):
    return T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Model:
    """A config plus a ParamSet plus the forward-graph builder."""

    def __init__(self, config: ModelConfig, params: ParamSet):
        self.config = config
        self.params = params

    def forward(self, images: np.ndarray, params: ParamSet | None = None) -> T.Tensor:
        """Logits for a batch of images with pixel values in [0, 255],
        shaped (n, C, H, W). Pass an alternative ParamSet to evaluate the
        same graph at a different parameter point."""
        ps = params if params is not None else self.params
        c, h, w = self.config.input_shape
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != (c, h, w):
            raise ValueError(
                f"forward: expected (n, {c}, {h}, {w}), got {images.shape}"
            )
        x = T.Tensor(images / np.float32(255.0))
        if self.config.arch == "mlp":
            a = T.flatten(x)
            n_hidden = len(self.config.hidden)
            for i in range(n_hidden):
                a = T.relu(T.bias_add(T.matmul(a, ps[f"w{i}"]), ps[f"b{i}"]))
            return T.bias_add(
                T.matmul(a, ps[f"w{n_hidden}"]), ps[f"b{n_hidden}"]
            )
        # smallcnn: conv3x3 + relu + pool, twice, then dense -> relu -> dense
        a = x
        for i in range(len(self.config.channels)):
            z = T.conv2d(a, ps[f"conv{i}_w"])
            cb = ps[f"conv{i}_b"]
            z = T.add(
                z,
                T.broadcast_to(T.reshape(cb, (1, cb.shape[0], 1, 1)), z.shape),
            )
            a = T.maxpool2d(T.relu(z))
        a = T.relu(T.bias_add(T.matmul(T.flatten(a), ps["fc0_w"]), ps["fc0_b"]))
        return T.bias_add(T.matmul(a, ps["fc1_w"]), ps["fc1_b"])

    def predict(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """Argmax class per image; ties resolve to the lowest index."""
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch):
                logits = self.forward(images[i : i + batch]).data
                out.append(logits.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def with_params(self, params: ParamSet) -> "Model":
        return Model(self.config, params)


def _cnn_flat_dim(cfg: ModelConfig) -> int:
    c, h, w = cfg.input_shape
    for _ in cfg.channels:
        h, w = (h - 2) // 2, (w - 2) // 2  # conv3 valid, then 2x2 pool
    return cfg.channels[-1] * h * w


def build_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.seed)
    params = ParamSet()
    c, h, w = config.input_shape
    if config.arch == "mlp":
        dims = [c * h * w, *config.hidden, config.classes]
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            params.add(f"w{i}", _uniform(rng, (din, dout), din))
            params.add(f"b{i}", _zeros(dout))
    else:
        cin = c
        for i, cout in enumerate(config.channels):
            params.add(f"conv{i}_w", _uniform(rng, (cout, cin, 3, 3), cin * 9))
            params.add(f"conv{i}_b", _zeros(cout))
            cin = cout
        flat = _cnn_flat_dim(config)
        params.add("fc0_w", _uniform(rng, (flat, config.dense), flat))
        params.add("fc0_b", _zeros(config.dense))
        params.add("fc1_w", _uniform(rng, (config.dense, config.classes), config.dense))
        params.add("fc1_b", _zeros(config.classes))
    return Model(config, params)


def task_loss(logits: T.Tensor, labels) -> T.Tensor:
    """Mean cross-entropy between predictions and integer labels."""
    return T.softmax_cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# checkpoints: versioned header (JSON: names/shapes) + flat f32 buffer


def save_checkpoint(path, model: Model):
    header = {
        "version": 1,
        "names": model.params.names,
        "shapes": [list(model.params[n].shape) for n in model.params.names],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack(">I", len(hb)))
        f.write(hb)
        for n in model.params.names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype=np.float32).tobytes())


def load_checkpoint(path, config: ModelConfig) -> Model:
    with open(path, "rb") as f:
        if f.read(8) != _CKPT_MAGIC:
            raise ValueError("bad checkpoint magic")
        (hlen,) = struct.unpack(">I", f.read(4))
        header = json.loads(f.read(hlen))
        model = build_model(config)
        if header["names"] != model.params.names:
            raise ValueError("checkpoint parameter names do not match config")
        tensors = []
        for name, shape in zip(header["names"], header["shapes"]):
            count = int(np.prod(shape))
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError("truncated checkpoint")
            arr = np.frombuffer(buf, dtype=np.float32).reshape(shape).copy()
            tensors.append(T.Tensor(arr, requires_grad=True))
        return model.with_params(model.params.replace(tensors))
