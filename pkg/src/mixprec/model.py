"""Single-head encoder for single-step time-series forecasting.

Architecture: input projection plus a fixed sinusoidal positional table, one
encoder layer (self-attention and a feed-forward block, each followed by a
residual add and batch normalization), global average pooling over time, and
an output projection. The float forward pass here is the training and
calibration reference; the quantized paths live in ``quantized.py``.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Fixed tensor vocabulary: name -> shape builder. Weight matrices are stored
# (fan_in, fan_out) and applied as x @ W + b.
def tensor_shapes(config: "ModelConfig") -> dict[str, tuple[int, ...]]:
    n, m, d, f, o = (
        config.seq_len,
        config.input_dim,
        config.d_model,
        config.ffn_dim,
        config.output_dim,
    )
    return {
        "l_input.weight": (m, d),
        "l_input.bias": (d,),
        "pos_encoding": (n, d),
        "mha.wq.weight": (d, d),
        "mha.wq.bias": (d,),
        "mha.wk.weight": (d, d),
        "mha.wk.bias": (d,),
        "mha.wv.weight": (d, d),
        "mha.wv.bias": (d,),
        "mha.wo.weight": (d, d),
        "mha.wo.bias": (d,),
        "bn_mha.gamma": (d,),
        "bn_mha.beta": (d,),
        "bn_mha.running_mean": (d,),
        "bn_mha.running_var": (d,),
        "ffn.w1.weight": (d, f),
        "ffn.w1.bias": (f,),
        "ffn.w2.weight": (f, d),
        "ffn.w2.bias": (d,),
        "bn_ffn.gamma": (d,),
        "bn_ffn.beta": (d,),
        "bn_ffn.running_mean": (d,),
        "bn_ffn.running_var": (d,),
        "l_output.weight": (d, o),
        "l_output.bias": (o,),
    }


# Parameters the optimizer updates (positional table and BN statistics are not
# gradient-trained).
def trainable_tensors(config: "ModelConfig") -> list[str]:
    return [
        name
        for name in tensor_shapes(config)
        if name != "pos_encoding" and "running_" not in name
    ]


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int
    input_dim: int
    d_model: int = 64
    output_dim: int = 1
    heads: int = 1

    def __post_init__(self) -> None:
        if self.seq_len <= 0 or self.input_dim <= 0 or self.d_model <= 0 or self.output_dim <= 0:
            raise ValueError("all dimensions must be positive")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")

    @property
    def ffn_dim(self) -> int:
        return 4 * self.d_model

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "input_dim": self.input_dim,
            "d_model": self.d_model,
            "output_dim": self.output_dim,
            "heads": self.heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class FloatModel:
    """Named float64 parameter tensors; mutated only by the trainer."""

    config: ModelConfig
    params: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        expected = tensor_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ValueError(f"missing tensor {name}")
            if self.params[name].shape != shape:
                raise ValueError(
                    f"{name}: shape {self.params[name].shape}, expected {shape}"
                )
        if np.any(self.params["bn_mha.running_var"] <= 0) or np.any(
            self.params["bn_ffn.running_var"] <= 0
        ):
            raise ValueError("BN running variance must be positive")

    def copy(self) -> "FloatModel":
        return FloatModel(self.config, {k: v.copy() for k, v in self.params.items()})


def sinusoidal_encoding(seq_len: int, d_model: int) -> np.ndarray:
    """Standard fixed sin/cos positional table, shape (seq_len, d_model)."""
    pe = np.zeros((seq_len, d_model))
    pos = np.arange(seq_len)[:, None].astype(np.float64)
    idx = np.arange(0, d_model, 2).astype(np.float64)
    angles = pos / np.power(10000.0, idx / d_model)[None, :]
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return pe


def init(config: ModelConfig, rng_seed: int) -> FloatModel:
    """Deterministic initialization: uniform(+-sqrt(1/fan_in)) weights, zero
    biases, identity batch norm, fixed positional table."""
    rng = np.random.default_rng(rng_seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith(".weight"):
            bound = math.sqrt(1.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".bias") or name.endswith(".beta") or "running_mean" in name:
            params[name] = np.zeros(shape)
        elif name.endswith(".gamma") or "running_var" in name:
            params[name] = np.ones(shape)
        elif name == "pos_encoding":
            params[name] = sinusoidal_encoding(config.seq_len, config.d_model)
        else:  # pragma: no cover - vocabulary is closed
            raise AssertionError(name)
    return FloatModel(config=config, params=params)


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def fold_bn(
    gamma: np.ndarray, beta: np.ndarray, mean: np.ndarray, var: np.ndarray, eps: float = BN_EPS
) -> tuple[np.ndarray, np.ndarray]:
    """Collapse normalize+affine into per-feature y = a*x + b."""
    a = gamma / np.sqrt(var + eps)
    return a, beta - a * mean


def _bn_forward(x: np.ndarray, model: FloatModel, prefix: str, mode: str, cache: dict):
    """Per-feature batch norm over (batch * time). TRAIN uses batch statistics
    (biased variance) and updates running statistics in place."""
    p = model.params
    gamma, beta = p[f"{prefix}.gamma"], p[f"{prefix}.beta"]
    if mode == "train":
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[-1]
        if count < 2:
            raise ValueError("training batch norm needs more than one row")
        p[f"{prefix}.running_mean"] *= 1 - BN_MOMENTUM
        p[f"{prefix}.running_mean"] += BN_MOMENTUM * mean
        p[f"{prefix}.running_var"] *= 1 - BN_MOMENTUM
        p[f"{prefix}.running_var"] += BN_MOMENTUM * var
    else:
        mean = p[f"{prefix}.running_mean"]
        var = p[f"{prefix}.running_var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    cache[prefix] = {"xhat": xhat, "inv_std": inv_std, "mode": mode}
    return gamma * xhat + beta


def forward_float(
    model: FloatModel, X: np.ndarray, mode: str = "eval"
) -> tuple[np.ndarray, dict]:
    """Reference forward pass.

    X is (seq_len, input_dim) or batched (batch, seq_len, input_dim); the
    output matches (output_dim,) or (batch, output_dim). Returns the output
    and a cache of intermediates for backpropagation.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    cfg = model.config
    if X.shape[1:] != (cfg.seq_len, cfg.input_dim):
        raise ValueError(
            f"input shape {X.shape[1:]} does not match (seq_len, input_dim) = "
            f"({cfg.seq_len}, {cfg.input_dim})"
        )
    p = model.params
    cache: dict = {"X": X, "mode": mode}

    H = X @ p["l_input.weight"] + p["l_input.bias"]
    Xe = H + p["pos_encoding"]

    Q = Xe @ p["mha.wq.weight"] + p["mha.wq.bias"]
    K = Xe @ p["mha.wk.weight"] + p["mha.wk.bias"]
    V = Xe @ p["mha.wv.weight"] + p["mha.wv.bias"]
    S = (Q @ K.transpose(0, 2, 1)) / math.sqrt(cfg.d_model)
    P = softmax(S)
    ctx = P @ V
    mha_out = ctx @ p["mha.wo.weight"] + p["mha.wo.bias"]

    R1 = Xe + mha_out
    A = _bn_forward(R1, model, "bn_mha", mode, cache)

    F1_pre = A @ p["ffn.w1.weight"] + p["ffn.w1.bias"]
    F1 = np.maximum(F1_pre, 0.0)
    F2 = F1 @ p["ffn.w2.weight"] + p["ffn.w2.bias"]

    R2 = A + F2
    F = _bn_forward(R2, model, "bn_ffn", mode, cache)

    g = F.mean(axis=1)
    Y = g @ p["l_output.weight"] + p["l_output.bias"]

    cache.update(
        H=H, Xe=Xe, Q=Q, K=K, V=V, S=S, P=P, ctx=ctx, mha_out=mha_out,
        R1=R1, A=A, F1_pre=F1_pre, F1=F1, F2=F2, R2=R2, F=F, g=g, Y=Y,
    )
    return (Y[0] if single else Y), cache


# --- model file envelope ------------------------------------------------------

FILE_VERSION = 1


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    if np.issubdtype(a.dtype, np.integer):
        a = a.astype("<i4")
    else:
        a = a.astype("<f8")
    return {
        "shape": list(a.shape),
        "dtype": a.dtype.str,
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_array(entry: dict) -> np.ndarray:
    data = base64.b64decode(entry["data"])
    a = np.frombuffer(data, dtype=np.dtype(entry["dtype"]))
    return a.reshape(entry["shape"]).copy()


def save_model(model, path: str | Path) -> None:
    """Write a float or quantized model as a versioned JSON envelope."""
    from .quantized import QuantizedModel  # cycle-free: only for isinstance

    doc: dict = {"version": FILE_VERSION, "config": None, "kind": None, "combo": None}
    if isinstance(model, FloatModel):
        doc["config"] = model.config.to_dict()
        doc["kind"] = "float"
        doc["tensors"] = {name: _encode_array(t) for name, t in model.params.items()}
    elif isinstance(model, QuantizedModel):
        doc["config"] = model.config.to_dict()
        doc["kind"] = "quantized"
        doc["combo"] = list(model.combo.bits)
        tensors = {}
        for name, qt in model.tensors.items():
            entry = _encode_array(qt.data)
            entry["quant"] = qt.params.to_dict()
            tensors[name] = entry
        for name, arr in model.bn_folds.items():
            tensors[name] = _encode_array(arr)
        doc["tensors"] = tensors
        doc["junctions"] = {name: qp.to_dict() for name, qp in model.act_params.items()}
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_model(path: str | Path):
    """Load a model envelope; returns FloatModel or QuantizedModel."""
    from .components import BitwidthCombination
    from .quant import QuantParams, QuantizedTensor
    from .quantized import QuantizedModel, build_quantized

    doc = json.loads(Path(path).read_text())
    version = doc.get("version")
    if version != FILE_VERSION:
        raise ValueError(f"{path}: unsupported model file version {version!r}")
    config = ModelConfig.from_dict(doc["config"])
    kind = doc.get("kind")
    if kind == "float":
        params = {name: _decode_array(t) for name, t in doc["tensors"].items()}
        return FloatModel(config=config, params=params)
    if kind == "quantized":
        combo = BitwidthCombination(tuple(doc["combo"]))
        tensors, bn_folds = {}, {}
        for name, entry in doc["tensors"].items():
            arr = _decode_array(entry)
            if "quant" in entry:
                tensors[name] = QuantizedTensor(arr, QuantParams.from_dict(entry["quant"]))
            else:
                bn_folds[name] = arr
        act_params = {
            name: QuantParams.from_dict(d) for name, d in doc["junctions"].items()
        }
        return build_quantized(config, combo, tensors, bn_folds, act_params)
    raise ValueError(f"{path}: unknown model kind {kind!r}")
