"""Training loop for the forecasting model: manual backprop, Adam, early stop.

The learning rate halves every three epochs; early stopping restores the
parameters of the best validation epoch. Everything is deterministic given
the config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .components import BitwidthCombination
from .model import BN_EPS, FloatModel, forward_float, trainable_tensors


@dataclass
class TrainConfig:
    epochs: int = 100
    patience: int = 10
    batch_size: int = 256
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    lr_halving_period_epochs: int = 3
    seed: int = 0
    val_fraction: float = 0.1
    qat: BitwidthCombination | None = None
    qat_ema_decay: float = 0.99

    def __post_init__(self) -> None:
        if min(self.epochs, self.patience, self.batch_size, self.lr_halving_period_epochs) <= 0:
            raise ValueError("epochs, patience, batch_size, halving period must be positive")
        if self.lr <= 0 or self.adam_eps <= 0:
            raise ValueError("lr and adam_eps must be positive")
        if self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Step-decayed rate for a zero-based epoch index."""
        return self.lr * 2.0 ** (-(epoch // self.lr_halving_period_epochs))


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopping_reason: str = ""

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)

    def to_dict(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "learning_rates": self.learning_rates,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopping_reason": self.stopping_reason,
        }


def _bn_backward(d_out: np.ndarray, bn_cache: dict, gamma: np.ndarray):
    """Gradient through batch norm; batch statistics in train mode."""
    xhat, inv_std = bn_cache["xhat"], bn_cache["inv_std"]
    axes = tuple(range(d_out.ndim - 1))
    d_gamma = (d_out * xhat).sum(axis=axes)
    d_beta = d_out.sum(axis=axes)
    d_xhat = d_out * gamma
    if bn_cache["mode"] == "train":
        dx = inv_std * (
            d_xhat
            - d_xhat.mean(axis=axes)
            - xhat * (d_xhat * xhat).mean(axis=axes)
        )
    else:
        dx = d_xhat * inv_std
    return dx, d_gamma, d_beta


def backward(model: FloatModel, cache: dict, dY: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every parameter tensor for the float forward pass.

    ``dY`` is the loss gradient at the output, shape (batch, output_dim).
    The positional table's gradient is computed too (it is simply excluded
    from optimizer updates).
    """
    p = model.params
    d = model.config.d_model
    n = model.config.seq_len
    grads: dict[str, np.ndarray] = {}
    dY = np.asarray(dY, dtype=np.float64)
    if dY.ndim == 1:
        dY = dY[None]

    g, F = cache["g"], cache["F"]
    grads["l_output.weight"] = g.T @ dY
    grads["l_output.bias"] = dY.sum(axis=0)
    dg = dY @ p["l_output.weight"].T

    dF = np.repeat(dg[:, None, :], n, axis=1) / n

    dR2, grads["bn_ffn.gamma"], grads["bn_ffn.beta"] = _bn_backward(
        dF, cache["bn_ffn"], p["bn_ffn.gamma"]
    )

    dA = dR2.copy()
    dF2 = dR2
    F1 = cache["F1"]
    grads["ffn.w2.weight"] = np.einsum("bnf,bnd->fd", F1, dF2)
    grads["ffn.w2.bias"] = dF2.sum(axis=(0, 1))
    dF1 = dF2 @ p["ffn.w2.weight"].T
    dF1_pre = dF1 * (cache["F1_pre"] > 0)
    A = cache["A"]
    grads["ffn.w1.weight"] = np.einsum("bnd,bnf->df", A, dF1_pre)
    grads["ffn.w1.bias"] = dF1_pre.sum(axis=(0, 1))
    dA += dF1_pre @ p["ffn.w1.weight"].T

    dR1, grads["bn_mha.gamma"], grads["bn_mha.beta"] = _bn_backward(
        dA, cache["bn_mha"], p["bn_mha.gamma"]
    )

    dXe = dR1.copy()
    d_mha = dR1
    ctx = cache["ctx"]
    grads["mha.wo.weight"] = np.einsum("bnd,bne->de", ctx, d_mha)
    grads["mha.wo.bias"] = d_mha.sum(axis=(0, 1))
    d_ctx = d_mha @ p["mha.wo.weight"].T

    P, V, Q, K = cache["P"], cache["V"], cache["Q"], cache["K"]
    dP = d_ctx @ V.transpose(0, 2, 1)
    dV = P.transpose(0, 2, 1) @ d_ctx
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(d)
    dQ = (dS @ K) * scale
    dK = (dS.transpose(0, 2, 1) @ Q) * scale

    Xe = cache["Xe"]
    for name, dT in (("mha.wq", dQ), ("mha.wk", dK), ("mha.wv", dV)):
        grads[f"{name}.weight"] = np.einsum("bnd,bne->de", Xe, dT)
        grads[f"{name}.bias"] = dT.sum(axis=(0, 1))
        dXe += dT @ p[f"{name}.weight"].T

    grads["pos_encoding"] = dXe.sum(axis=0)
    dH = dXe
    X = cache["X"]
    grads["l_input.weight"] = np.einsum("bnm,bnd->md", X, dH)
    grads["l_input.bias"] = dH.sum(axis=(0, 1))

    # running statistics carry no gradient
    for prefix in ("bn_mha", "bn_ffn"):
        grads[f"{prefix}.running_mean"] = np.zeros(d)
        grads[f"{prefix}.running_var"] = np.zeros(d)
    return grads


class Adam:
    """Standard Adam with bias correction over named tensors."""

    def __init__(self, names: list[str], cfg: TrainConfig):
        self.names = names
        self.cfg = cfg
        self.m = {name: None for name in names}
        self.v = {name: None for name in names}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        cfg = self.cfg
        self.t += 1
        b1c = 1.0 - cfg.adam_beta1**self.t
        b2c = 1.0 - cfg.adam_beta2**self.t
        for name in self.names:
            grad = grads[name]
            if self.m[name] is None:
                self.m[name] = np.zeros_like(grad)
                self.v[name] = np.zeros_like(grad)
            self.m[name] = cfg.adam_beta1 * self.m[name] + (1 - cfg.adam_beta1) * grad
            self.v[name] = cfg.adam_beta2 * self.v[name] + (1 - cfg.adam_beta2) * grad**2
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            params[name] -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def _split_validation(X: np.ndarray, y: np.ndarray, cfg: TrainConfig):
    """Last val_fraction of the training pairs, time-ordered."""
    count = len(X)
    val_count = max(1, int(round(count * cfg.val_fraction)))
    if val_count >= count:
        raise ValueError("not enough pairs to carve a validation split")
    fit = count - val_count
    return X[:fit], y[:fit], X[fit:], y[fit:]


def train(
    model: FloatModel, dataset, cfg: TrainConfig
) -> tuple[FloatModel, TrainReport]:
    """Train a copy of ``model`` on the dataset's training split.

    ``dataset`` provides train_X (pairs, n, m) and train_y (pairs,) in
    normalized units; the final 10% (time-ordered) is held out for early
    stopping.
    """
    return _train_loop(model, dataset, cfg, fake_ctx=None)[:2]


def _train_loop(model: FloatModel, dataset, cfg: TrainConfig, fake_ctx):
    """Shared float/QAT loop. ``fake_ctx`` is None for plain training, else a
    quantized.QatContext driving fake-quantized forwards and STE backwards."""
    X_all = np.asarray(dataset.train_X, dtype=np.float64)
    y_all = np.asarray(dataset.train_y, dtype=np.float64).reshape(len(X_all), -1)
    if X_all.shape[1:] != (model.config.seq_len, model.config.input_dim):
        raise ValueError(
            f"dataset windows {X_all.shape[1:]} do not match model config "
            f"({model.config.seq_len}, {model.config.input_dim})"
        )
    X_fit, y_fit, X_val, y_val = _split_validation(X_all, y_all, cfg)

    model = model.copy()
    opt = Adam(trainable_tensors(model.config), cfg)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()

    best_params = None
    best_ranges = None
    epochs_since_best = 0

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(X_fit))
        epoch_sq_sum, seen = 0.0, 0
        for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            Xb, yb = X_fit[idx], y_fit[idx]
            if fake_ctx is None:
                Y, cache = forward_float(model, Xb, mode="train")
                dY = 2.0 * (Y - yb) / Y.size
                grads = backward(model, cache, dY)
            else:
                Y, cache = fake_ctx.forward_train(model, Xb)
                dY = 2.0 * (Y - yb) / Y.size
                grads = fake_ctx.backward(model, cache, dY)
            loss = mse(Y, yb)
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, batch {batch_index} "
                    f"(lr={lr})"
                )
            opt.step(model.params, grads, lr)
            epoch_sq_sum += loss * len(idx)
            seen += len(idx)

        if fake_ctx is None:
            val_pred, _ = forward_float(model, X_val, mode="eval")
        else:
            val_pred = fake_ctx.forward_eval(model, X_val)
        val_loss = mse(val_pred, y_val)

        report.train_losses.append(epoch_sq_sum / max(seen, 1))
        report.val_losses.append(val_loss)
        report.learning_rates.append(lr)

        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
            best_ranges = fake_ctx.snapshot_ranges() if fake_ctx is not None else None
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                report.stopping_reason = "early_stopping"
                break
    if not report.stopping_reason:
        report.stopping_reason = "max_epochs"

    if best_params is not None:
        model.params = best_params
    if fake_ctx is not None and best_ranges is not None:
        fake_ctx.restore_ranges(best_ranges)
    return model, report, fake_ctx


def train_qat(model: FloatModel, dataset, cfg: TrainConfig):
    """Quantization-aware training with straight-through gradients.

    With ``cfg.qat`` unset this reproduces plain training bit for bit.
    Returns (model, report, frozen activation ranges) where the ranges are
    the EMA-tracked per-junction (min, max) pairs for final calibration.
    """
    if cfg.qat is None:
        trained, report, _ = _train_loop(model, dataset, cfg, fake_ctx=None)
        return trained, report, None
    from .quantized import QatContext

    ctx = QatContext(model.config, cfg.qat, ema_decay=cfg.qat_ema_decay)
    trained, report, ctx = _train_loop(model, dataset, cfg, fake_ctx=ctx)
    return trained, report, ctx.frozen_ranges()
