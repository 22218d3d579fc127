"""Slice encoder, slice aggregator and classification head.

A volume is a sequence of ``S`` per-slice feature vectors.  The same two-layer
perceptron embeds every slice, an aggregator pools the sequence into one
vector (plain mean, or a small pre-norm transformer encoder followed by mean
pooling) and a LayerNorm -> Dropout -> Linear head produces class logits.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

AGGREGATORS = ("mean", "transformer")
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    input_dim: int = 16
    embed_dim: int = 32
    slices: int = 16
    num_classes: int = 2
    aggregator: str = "transformer"
    layers: int = 2
    heads: int = 4
    ff_dim: int | None = None
    dropout_p: float = 0.3
    encoder_hidden: int | None = None
    positional_encoding: bool = False

    def __post_init__(self):
        if self.ff_dim is None:
            self.ff_dim = 4 * self.embed_dim
        if self.encoder_hidden is None:
            self.encoder_hidden = 2 * self.embed_dim

    def validate(self) -> "ModelConfig":
        for key in ("input_dim", "embed_dim", "slices", "ff_dim", "encoder_hidden"):
            if int(getattr(self, key)) < 1:
                raise ValueError(f"model.{key} must be a positive int, got {getattr(self, key)!r}")
        if self.num_classes < 2:
            raise ValueError(f"model.num_classes must be >= 2, got {self.num_classes}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"model.aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"model.dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.aggregator == "transformer":
            if self.layers < 0 or self.heads < 1:
                raise ValueError("model.layers must be >= 0 and model.heads >= 1")
            if self.embed_dim % self.heads:
                raise ValueError(f"model.embed_dim={self.embed_dim} is not divisible by "
                                 f"model.heads={self.heads}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"model.{sorted(unknown)[0]}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VolumeBatch:
    features: np.ndarray  # [b, S, D_in]
    labels: np.ndarray
    groups: np.ndarray
    attrs: np.ndarray | None = None  # evaluation attribute (site or gender) per sample

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        b = self.features.shape[0]
        if self.features.ndim != 3 or len(self.labels) != b or len(self.groups) != b:
            raise ValueError(f"inconsistent batch: features {self.features.shape}, "
                             f"{len(self.labels)} labels, {len(self.groups)} groups")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict[str, Parameter] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def values(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data = v.copy()
            self.params[k].zero_grad()


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape census; the single source for init and counting."""
    c = config
    shapes: dict[str, tuple] = {
        "encoder.fc1.weight": (c.input_dim, c.encoder_hidden),
        "encoder.fc1.bias": (c.encoder_hidden,),
        "encoder.fc2.weight": (c.encoder_hidden, c.embed_dim),
        "encoder.fc2.bias": (c.embed_dim,),
    }
    if c.aggregator == "transformer":
        d = c.embed_dim
        for i in range(c.layers):
            pre = f"aggregator.layer{i}."
            shapes[pre + "ln1.gain"] = (d,)
            shapes[pre + "ln1.bias"] = (d,)
            for proj in ("query", "key", "value", "out"):
                shapes[pre + f"attn.{proj}.weight"] = (d, d)
                shapes[pre + f"attn.{proj}.bias"] = (d,)
            shapes[pre + "ln2.gain"] = (d,)
            shapes[pre + "ln2.bias"] = (d,)
            shapes[pre + "ff1.weight"] = (d, c.ff_dim)
            shapes[pre + "ff1.bias"] = (c.ff_dim,)
            shapes[pre + "ff2.weight"] = (c.ff_dim, d)
            shapes[pre + "ff2.bias"] = (d,)
    shapes["head.ln.gain"] = (c.embed_dim,)
    shapes["head.ln.bias"] = (c.embed_dim,)
    shapes["head.fc.weight"] = (c.embed_dim, c.num_classes)
    shapes["head.fc.bias"] = (c.num_classes,)
    return shapes


def count_params(config: ModelConfig, include_encoder: bool = True) -> int:
    return sum(int(np.prod(s)) for name, s in param_shapes(config).items()
               if include_encoder or not name.startswith("encoder."))


def init_params(config: ModelConfig, seed: int | np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-a, a, size=shape)
        params[name] = Parameter(name, value)
    return ModelParams(config, params)


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def encode_slices(params: ModelParams, features) -> Tensor:
    """Apply the shared slice encoder to every slice of every volume."""
    c = params.config
    x = ad.tensor(features)
    if x.ndim != 3 or x.shape[2] != c.input_dim:
        raise ad.ShapeError(f"expected features [b, S, {c.input_dim}], got {x.shape}")
    h = ad.relu(_linear(x, params, "encoder.fc1"))
    return _linear(h, params, "encoder.fc2")


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def self_attention(params: ModelParams, x: Tensor, prefix: str, heads: int) -> Tensor:
    b, s, d = x.shape
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, s, heads, dh).transpose(0, 2, 1, 3)

    q = split(_linear(x, params, prefix + "query"))
    k = split(_linear(x, params, prefix + "key"))
    v = split(_linear(x, params, prefix + "value"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    ctx = ad.softmax(scores) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, s, d)
    return _linear(ctx, params, prefix + "out")


def encoder_layer(params: ModelParams, x: Tensor, index: int) -> Tensor:
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""
    pre = f"aggregator.layer{index}."
    h = ad.layer_norm(x, params[pre + "ln1.gain"], params[pre + "ln1.bias"], LN_EPS)
    x = x + self_attention(params, h, pre + "attn.", params.config.heads)
    h = ad.layer_norm(x, params[pre + "ln2.gain"], params[pre + "ln2.bias"], LN_EPS)
    h = _linear(ad.relu(_linear(h, params, pre + "ff1")), params, pre + "ff2")
    return x + h


def aggregate(params: ModelParams, embeddings: Tensor, mode: str | None = None,
              train_mode: bool = False, rng=None) -> Tensor:
    c = params.config
    mode = mode or c.aggregator
    if mode not in AGGREGATORS:
        raise ValueError(f"unknown aggregator {mode!r}")
    x = ad.tensor(embeddings)
    if mode == "transformer":
        if c.positional_encoding:
            x = x + sinusoidal_encoding(x.shape[1], x.shape[2])
        for i in range(c.layers):
            x = encoder_layer(params, x, i)
    return x.mean(axis=1)


def classify(params: ModelParams, z: Tensor, train_mode: bool = False, rng=None) -> Tensor:
    h = ad.layer_norm(z, params["head.ln.gain"], params["head.ln.bias"], LN_EPS)
    h = ad.dropout(h, params.config.dropout_p, train_mode, rng)
    return _linear(h, params, "head.fc")


def forward(params: ModelParams, batch: VolumeBatch | np.ndarray, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    features = batch.features if isinstance(batch, VolumeBatch) else batch
    if train_mode and rng is None and params.config.dropout_p > 0:
        raise ValueError("train-mode forward with dropout needs an rng")
    emb = encode_slices(params, features)
    z = aggregate(params, emb, train_mode=train_mode, rng=rng)
    return classify(params, z, train_mode=train_mode, rng=rng)


# checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"GRDOCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path, seed: int | None = None, extra: dict | None = None) -> None:
    """Write ``magic | u64 header length | JSON header | float64 LE payload``."""
    entries, chunks, offset = [], [], 0
    for name, p in params.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {"format_version": CHECKPOINT_VERSION, "model": params.config.to_dict(),
              "seed": seed, "params": entries, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    payload = np.frombuffer(raw[16 + n:], dtype="<f8")
    config = ModelConfig.from_dict(header["model"])
    params = {}
    for e in header["params"]:
        size = int(np.prod(e["shape"]))
        value = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
        params[e["name"]] = Parameter(e["name"], value)
    expected = param_shapes(config)
    if list(params) != list(expected):
        raise ValueError(f"{path}: parameter names do not match the stored model config")
    return ModelParams(config, params), header

