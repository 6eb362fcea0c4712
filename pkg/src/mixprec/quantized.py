"""Quantized execution: calibration, fake-quant simulation, integer inference.

The fake-quant path runs the float dataflow with quantize-dequantize inserted
at every tensor the cascade plan quantizes; the integer path performs the
same computation with integer arithmetic only, rescaling between grids
through fixed-point requantizers. Both paths share grids and rounding, so
they agree to the last integer step except where the integer exponential
table approximates the float softmax.

Residual adds requantize each addend onto the output grid before the integer
addition; the FFN's hidden grid is unsigned with zero point 0, so its
requantizer clamp doubles as the ReLU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .components import BitwidthCombination, ComponentId
from .model import (
    BN_EPS,
    FloatModel,
    ModelConfig,
    fold_bn,
    forward_float,
    softmax,
    tensor_shapes,
)
from .quant import (
    CascadePlan,
    QuantParams,
    QuantizedTensor,
    Requantizer,
    derive_bias_params,
    dequantize,
    fake_quantize,
    make_requantizer,
    params_for_range,
    plan_cascade,
    quantize,
    requantize,
    round_half_away,
)

# Activation junctions in dataflow order, each quantized at the bitwidth of
# the component that produces it.
JUNCTION_COMPONENT: dict[str, ComponentId] = {
    "input": ComponentId.L_INPUT,
    "l_input.out": ComponentId.L_INPUT,
    "add_pe.out": ComponentId.ADD_PE,
    "mha.q": ComponentId.MHA,
    "mha.k": ComponentId.MHA,
    "mha.v": ComponentId.MHA,
    "mha.scores": ComponentId.MHA,
    "mha.probs": ComponentId.MHA,
    "mha.context": ComponentId.MHA,
    "mha.out": ComponentId.MHA,
    "add_mha.out": ComponentId.ADD_MHA,
    "bn_mha.out": ComponentId.BN_MHA,
    "ffn.hidden": ComponentId.FFN,
    "ffn.out": ComponentId.FFN,
    "add_ffn.out": ComponentId.ADD_FFN,
    "bn_ffn.out": ComponentId.BN_FFN,
    "gap.out": ComponentId.GAP,
    "output": ComponentId.L_OUTPUT,
}

UNSIGNED_JUNCTIONS = {"mha.probs", "ffn.hidden"}

# Which junction feeds each linear layer (determines the bias grid).
LINEAR_INPUT_JUNCTION = {
    "l_input": "input",
    "mha.wq": "add_pe.out",
    "mha.wk": "add_pe.out",
    "mha.wv": "add_pe.out",
    "mha.wo": "mha.context",
    "ffn.w1": "bn_mha.out",
    "ffn.w2": "ffn.hidden",
    "l_output": "gap.out",
}

# Weight tensors and the component whose bitwidth quantizes them.
WEIGHT_COMPONENT = {
    "l_input.weight": ComponentId.L_INPUT,
    "pos_encoding": ComponentId.ADD_PE,
    "mha.wq.weight": ComponentId.MHA,
    "mha.wk.weight": ComponentId.MHA,
    "mha.wv.weight": ComponentId.MHA,
    "mha.wo.weight": ComponentId.MHA,
    "ffn.w1.weight": ComponentId.FFN,
    "ffn.w2.weight": ComponentId.FFN,
    "l_output.weight": ComponentId.L_OUTPUT,
}

# Float-cache tensor observed for each junction during calibration.
JUNCTION_CACHE_KEY = {
    "input": "X",
    "l_input.out": "H",
    "add_pe.out": "Xe",
    "mha.q": "Q",
    "mha.k": "K",
    "mha.v": "V",
    "mha.scores": "S",
    "mha.probs": "P",
    "mha.context": "ctx",
    "mha.out": "mha_out",
    "add_mha.out": "R1",
    "bn_mha.out": "A",
    "ffn.hidden": "F1",
    "ffn.out": "F2",
    "add_ffn.out": "R2",
    "bn_ffn.out": "F",
    "gap.out": "g",
    "output": "Y",
}


class CalibrationError(ValueError):
    """Missing or inconsistent calibration for a junction."""


@dataclass(frozen=True)
class CalibrationSet:
    """Per-junction activation quantization parameters."""

    activations: dict[str, QuantParams]

    def require(self, junction: str) -> QuantParams:
        if junction not in self.activations:
            raise CalibrationError(f"no calibration for junction {junction!r}")
        return self.activations[junction]


def junction_bitwidth(plan: CascadePlan, junction: str) -> int:
    return plan[JUNCTION_COMPONENT[junction]].output_bitwidth


def collect_ranges(model: FloatModel, X: np.ndarray) -> dict[str, tuple[float, float]]:
    """Observed (min, max) per junction from a float forward over a batch."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    _, cache = forward_float(model, X, mode="eval")
    ranges = {}
    for junction, key in JUNCTION_CACHE_KEY.items():
        t = cache[key]
        ranges[junction] = (float(t.min()), float(t.max()))
    return ranges


def calibration_from_ranges(
    ranges: dict[str, tuple[float, float]], plan: CascadePlan
) -> CalibrationSet:
    activations = {}
    for junction in JUNCTION_COMPONENT:
        if junction not in ranges:
            raise CalibrationError(f"no calibration for junction {junction!r}")
        mn, mx = ranges[junction]
        activations[junction] = params_for_range(
            mn, mx, junction_bitwidth(plan, junction), signed=junction not in UNSIGNED_JUNCTIONS
        )
    return CalibrationSet(activations=activations)


def calibrate(
    model: FloatModel, combo: BitwidthCombination, calibration_data: np.ndarray
) -> CalibrationSet:
    """Post-training calibration: one float pass over the calibration batch."""
    data = np.asarray(calibration_data, dtype=np.float64)
    if data.size == 0:
        raise ValueError("calibration data must be non-empty")
    return calibration_from_ranges(collect_ranges(model, data), plan_cascade(combo))


def _weight_params(model: FloatModel, plan: CascadePlan) -> dict[str, QuantParams]:
    out = {}
    for name, comp in WEIGHT_COMPONENT.items():
        w = model.params[name]
        bits = plan[comp].weight_bitwidth
        out[name] = params_for_range(float(w.min()), float(w.max()), bits, signed=True)
    return out


def _bias_params(
    name: str, act_params: dict[str, QuantParams], weight_params: dict[str, QuantParams]
) -> QuantParams:
    x = act_params[LINEAR_INPUT_JUNCTION[name]]
    w = weight_params[f"{name}.weight"]
    return derive_bias_params(x, w)


def _assert_accumulator_bound(config: ModelConfig, plan: CascadePlan) -> None:
    """Worst-case |acc| must stay inside 32 bits for every integer matmul."""
    d, m, n = config.d_model, config.input_dim, config.seq_len
    fan_ins = {
        "l_input": m,
        "mha.wq": d,
        "mha.wk": d,
        "mha.wv": d,
        "mha.wo": d,
        "ffn.w1": d,
        "ffn.w2": config.ffn_dim,
        "l_output": d,
    }
    for name, fan_in in fan_ins.items():
        junction = LINEAR_INPUT_JUNCTION[name]
        bx = junction_bitwidth(plan, junction)
        comp = WEIGHT_COMPONENT[f"{name}.weight"]
        bw = plan[comp].weight_bitwidth
        bias_bits = plan.linear_bias_bits[name]
        worst = fan_in * (1 << bx) * (1 << bw) + (1 << (bias_bits - 1))
        if worst >= (1 << 31):
            raise ValueError(
                f"{name}: worst-case accumulator {worst} exceeds 32 bits for this config"
            )
    score_worst = d * (1 << (2 * plan[ComponentId.MHA].output_bitwidth))
    ctx_worst = n * (1 << (2 * plan[ComponentId.MHA].output_bitwidth))
    if max(score_worst, ctx_worst, n * 256) >= (1 << 31):
        raise ValueError("attention accumulator exceeds 32 bits for this config")


# --- integer softmax ---------------------------------------------------------

# 2**(-f) lookup for the decomposition exp(t) = 2**(-(n+f)), t <= 0, with
# integer linear interpolation between entries. Entry precision and table
# size are chosen so the integer path stays within one grid step of the
# float softmax at 8-bit probability grids.
_EXP2_IDX_BITS = 10
_EXP2_LUT_BITS = 24
_EXP2_LUT = np.array(
    [
        round((2.0 ** (-i / (1 << _EXP2_IDX_BITS))) * (1 << _EXP2_LUT_BITS))
        for i in range((1 << _EXP2_IDX_BITS) + 1)
    ],
    dtype=np.int64,
)
_SOFTMAX_FRAC_BITS = 26  # fixed-point resolution of t * log2(e)
_PROB_ACC_BITS = 24  # normalized probabilities in Q24


def _rounding_shift_array(p: np.ndarray, shift: np.ndarray | int) -> np.ndarray:
    """Per-element divide by 2**shift, rounding half away from zero."""
    shift = np.asarray(shift, dtype=np.int64)
    half = np.where(shift > 0, np.int64(1) << np.maximum(shift - 1, 0), 0)
    mag = (np.abs(p) + half) >> shift
    return np.sign(p) * mag


def integer_softmax_fixed(scores_q: np.ndarray, score_scale: float) -> np.ndarray:
    """Row-wise softmax over integer scores in Q(_PROB_ACC_BITS) fixed point.

    Max-subtraction in the integer domain, exponential via the 2**x
    decomposition with the fractional table (linearly interpolated in integer
    arithmetic), then normalization by rounded integer division. Rows sum to
    exactly 2**_PROB_ACC_BITS: the division residue goes to the entries with
    the largest remainders (ties to the lower index).
    """
    scores_q = np.asarray(scores_q, dtype=np.int64)
    u = scores_q.max(axis=-1, keepdims=True) - scores_q  # >= 0, zero point cancels
    c = round(score_scale * math.log2(math.e) * (1 << _SOFTMAX_FRAC_BITS))
    c = min(c, 1 << 40)  # beyond this the softmax is one-hot anyway
    w = u * c
    n_exp = w >> _SOFTMAX_FRAC_BITS
    rem = w & ((1 << _SOFTMAX_FRAC_BITS) - 1)
    interp_bits = _SOFTMAX_FRAC_BITS - _EXP2_IDX_BITS
    idx = rem >> interp_bits
    frac = rem & ((1 << interp_bits) - 1)
    base = _EXP2_LUT[idx]
    delta = _EXP2_LUT[idx + 1] - base  # negative
    e_val = base + _rounding_shift_array(delta * frac, interp_bits)
    e_val = np.where(n_exp >= 62, 0, _rounding_shift_array(e_val, np.minimum(n_exp, 61)))

    total = e_val.sum(axis=-1, keepdims=True)  # >= 2**15 (the max entry)
    raw = e_val << _PROB_ACC_BITS
    q = raw // total
    remainder = raw - q * total
    deficit = (1 << _PROB_ACC_BITS) - q.sum(axis=-1)  # in [0, row_len)
    order = np.argsort(-remainder, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(scores_q.shape[-1]), axis=-1)
    return q + (ranks < deficit[..., None])


# --- quantized model ----------------------------------------------------------


@dataclass
class _Runtime:
    """Requantizers and folded integer constants derived from the params."""

    linear: dict[str, Requantizer] = field(default_factory=dict)
    add: dict[str, tuple[Requantizer, Requantizer]] = field(default_factory=dict)
    bn: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    scores: Requantizer | None = None
    probs: Requantizer | None = None
    gap: Requantizer | None = None


@dataclass
class QuantizedModel:
    """Integer tensors plus grids, cascade plan, and derived requantizers."""

    config: ModelConfig
    combo: BitwidthCombination
    plan: CascadePlan
    tensors: dict[str, QuantizedTensor]  # weights and biases
    bn_folds: dict[str, np.ndarray]  # bn_{mha,ffn}.fold_{a,b}, float64
    act_params: dict[str, QuantParams]
    runtime: _Runtime = field(repr=False, default_factory=_Runtime)

    def quantize_input(self, X: np.ndarray) -> QuantizedTensor:
        return quantize(np.asarray(X, dtype=np.float64), self.act_params["input"])


def _bn_integer_constants(
    a: np.ndarray, b: np.ndarray, in_p: QuantParams, out_p: QuantParams
) -> dict[str, np.ndarray]:
    """Per-feature fixed-point multiplier/shift plus pre-shift offset."""
    ratio = a * (in_p.scale / out_p.scale)
    d = ratio.shape[0]
    sign = np.sign(ratio).astype(np.int64)
    mult = np.zeros(d, dtype=np.int64)
    shift = np.zeros(d, dtype=np.int64)
    for j in range(d):
        mag = abs(float(ratio[j]))
        if mag < 2.0**-31:
            sign[j] = 0
            continue
        r = make_requantizer(mag, 1.0)
        mult[j], shift[j] = r.multiplier, r.shift
    offset_real = b / out_p.scale
    raw = round_half_away(offset_real * np.exp2(shift.astype(np.float64)))
    cap = float(1 << 61)  # beyond this the output saturates regardless
    offset = np.clip(raw, -cap, cap).astype(np.int64)
    return {"sign": sign, "mult": mult, "shift": shift, "offset": offset}


def _build_runtime(qm: QuantizedModel) -> None:
    act = qm.act_params
    rt = qm.runtime
    d = qm.config.d_model

    for name, out_junction in (
        ("l_input", "l_input.out"),
        ("mha.wq", "mha.q"),
        ("mha.wk", "mha.k"),
        ("mha.wv", "mha.v"),
        ("mha.wo", "mha.out"),
        ("ffn.w1", "ffn.hidden"),
        ("ffn.w2", "ffn.out"),
        ("l_output", "output"),
    ):
        s_acc = qm.tensors[f"{name}.bias"].params.scale  # = s_x * s_w
        rt.linear[name] = make_requantizer(s_acc, act[out_junction].scale)

    rt.add["add_pe"] = (
        make_requantizer(act["l_input.out"].scale, act["add_pe.out"].scale),
        make_requantizer(qm.tensors["pos_encoding"].params.scale, act["add_pe.out"].scale),
    )
    rt.add["add_mha"] = (
        make_requantizer(act["add_pe.out"].scale, act["add_mha.out"].scale),
        make_requantizer(act["mha.out"].scale, act["add_mha.out"].scale),
    )
    rt.add["add_ffn"] = (
        make_requantizer(act["bn_mha.out"].scale, act["add_ffn.out"].scale),
        make_requantizer(act["ffn.out"].scale, act["add_ffn.out"].scale),
    )

    s_q, s_k = act["mha.q"].scale, act["mha.k"].scale
    rt.scores = make_requantizer(s_q * s_k / math.sqrt(d), act["mha.scores"].scale)
    rt.probs = make_requantizer(2.0**-_PROB_ACC_BITS, act["mha.probs"].scale)
    rt.gap = make_requantizer(act["bn_ffn.out"].scale / qm.config.seq_len, act["gap.out"].scale)

    for prefix, in_junction, out_junction in (
        ("bn_mha", "add_mha.out", "bn_mha.out"),
        ("bn_ffn", "add_ffn.out", "bn_ffn.out"),
    ):
        rt.bn[prefix] = _bn_integer_constants(
            qm.bn_folds[f"{prefix}.fold_a"],
            qm.bn_folds[f"{prefix}.fold_b"],
            act[in_junction],
            act[out_junction],
        )


def build_quantized(
    config: ModelConfig,
    combo: BitwidthCombination,
    tensors: dict[str, QuantizedTensor],
    bn_folds: dict[str, np.ndarray],
    act_params: dict[str, QuantParams],
) -> QuantizedModel:
    """Assemble a quantized model from its stored pieces (used by file load)."""
    plan = plan_cascade(combo)
    _assert_accumulator_bound(config, plan)
    for junction in JUNCTION_COMPONENT:
        if junction not in act_params:
            raise CalibrationError(f"no calibration for junction {junction!r}")
    qm = QuantizedModel(
        config=config,
        combo=combo,
        plan=plan,
        tensors=tensors,
        bn_folds=bn_folds,
        act_params=act_params,
    )
    _build_runtime(qm)
    return qm


def quantize_model(
    model: FloatModel,
    combo: BitwidthCombination,
    calibration_data: np.ndarray | None = None,
    ranges: dict[str, tuple[float, float]] | None = None,
) -> QuantizedModel:
    """Quantize a trained float model.

    Activation grids come from ``ranges`` (e.g. frozen QAT statistics) or from
    a calibration pass over ``calibration_data``; exactly one must be given.
    Batch norm is folded from running statistics before quantization.
    """
    plan = plan_cascade(combo)
    if (calibration_data is None) == (ranges is None):
        raise ValueError("provide exactly one of calibration_data or ranges")
    if ranges is not None:
        calib = calibration_from_ranges(ranges, plan)
    else:
        calib = calibrate(model, combo, calibration_data)

    weight_params = _weight_params(model, plan)
    tensors: dict[str, QuantizedTensor] = {}
    for name, wp in weight_params.items():
        tensors[name] = quantize(model.params[name], wp)
    for name in LINEAR_INPUT_JUNCTION:
        bp = _bias_params(name, calib.activations, weight_params)
        tensors[f"{name}.bias"] = quantize(model.params[f"{name}.bias"], bp)

    bn_folds = {}
    for prefix in ("bn_mha", "bn_ffn"):
        a, b = fold_bn(
            model.params[f"{prefix}.gamma"],
            model.params[f"{prefix}.beta"],
            model.params[f"{prefix}.running_mean"],
            model.params[f"{prefix}.running_var"],
        )
        bn_folds[f"{prefix}.fold_a"] = a
        bn_folds[f"{prefix}.fold_b"] = b

    return build_quantized(model.config, combo, tensors, bn_folds, calib.activations)


# --- integer forward ----------------------------------------------------------


def _int_linear(
    x_q: np.ndarray, x_p: QuantParams, qm: QuantizedModel, name: str, out_junction: str
) -> np.ndarray:
    w = qm.tensors[f"{name}.weight"]
    b = qm.tensors[f"{name}.bias"]
    out_p = qm.act_params[out_junction]
    acc = (x_q - x_p.zero_point) @ (w.data - w.params.zero_point) + b.data
    return requantize(
        acc, qm.runtime.linear[name], out_p.zero_point, out_p.bitwidth, out_p.signed
    )


def _int_add(
    x1_q: np.ndarray,
    p1: QuantParams,
    x2_q: np.ndarray,
    p2: QuantParams,
    qm: QuantizedModel,
    add_name: str,
    out_junction: str,
) -> np.ndarray:
    out_p = qm.act_params[out_junction]
    r1, r2 = qm.runtime.add[add_name]
    a1 = requantize(x1_q - p1.zero_point, r1, out_p.zero_point, out_p.bitwidth, out_p.signed)
    a2 = requantize(x2_q - p2.zero_point, r2, out_p.zero_point, out_p.bitwidth, out_p.signed)
    return np.clip(a1 + a2 - out_p.zero_point, out_p.q_min, out_p.q_max)


def _int_bn(
    x_q: np.ndarray, in_p: QuantParams, qm: QuantizedModel, prefix: str, out_junction: str
) -> np.ndarray:
    out_p = qm.act_params[out_junction]
    bn = qm.runtime.bn[prefix]
    acc = (x_q - in_p.zero_point).astype(np.int64)
    product = bn["sign"] * acc * bn["mult"] + bn["offset"]
    y = _rounding_shift_array(product, bn["shift"]) + out_p.zero_point
    return np.clip(y, out_p.q_min, out_p.q_max)


def forward_integer(qm: QuantizedModel, X_q: QuantizedTensor) -> np.ndarray:
    """Integer-only inference; returns the dequantized output."""
    in_p = qm.act_params["input"]
    if X_q.params != in_p:
        raise ValueError("input quantization parameters do not match the model's input grid")
    x = np.asarray(X_q.data, dtype=np.int64)
    single = x.ndim == 2
    if single:
        x = x[None]
    cfg = qm.config
    if x.shape[1:] != (cfg.seq_len, cfg.input_dim):
        raise ValueError(f"input shape {x.shape[1:]} does not match the model config")
    act = qm.act_params

    h = _int_linear(x, in_p, qm, "l_input", "l_input.out")
    pe = qm.tensors["pos_encoding"]
    xe = _int_add(
        h, act["l_input.out"], pe.data, pe.params, qm, "add_pe", "add_pe.out"
    )

    q = _int_linear(xe, act["add_pe.out"], qm, "mha.wq", "mha.q")
    k = _int_linear(xe, act["add_pe.out"], qm, "mha.wk", "mha.k")
    v = _int_linear(xe, act["add_pe.out"], qm, "mha.wv", "mha.v")

    s_acc = (q - act["mha.q"].zero_point) @ (k - act["mha.k"].zero_point).transpose(0, 2, 1)
    sp = act["mha.scores"]
    s = requantize(s_acc, qm.runtime.scores, sp.zero_point, sp.bitwidth, sp.signed)

    p_fix = integer_softmax_fixed(s, sp.scale)
    pp = act["mha.probs"]
    p = requantize(p_fix, qm.runtime.probs, pp.zero_point, pp.bitwidth, pp.signed)

    ctx_acc = (p - pp.zero_point) @ (v - act["mha.v"].zero_point)
    cp = act["mha.context"]
    r_ctx = make_requantizer(pp.scale * act["mha.v"].scale, cp.scale)
    ctx = requantize(ctx_acc, r_ctx, cp.zero_point, cp.bitwidth, cp.signed)

    mo = _int_linear(ctx, cp, qm, "mha.wo", "mha.out")
    r1 = _int_add(xe, act["add_pe.out"], mo, act["mha.out"], qm, "add_mha", "add_mha.out")
    a = _int_bn(r1, act["add_mha.out"], qm, "bn_mha", "bn_mha.out")

    # the unsigned hidden grid has zero point 0, so the requantizer's lower
    # clamp is exactly the ReLU
    f1 = _int_linear(a, act["bn_mha.out"], qm, "ffn.w1", "ffn.hidden")
    f2 = _int_linear(f1, act["ffn.hidden"], qm, "ffn.w2", "ffn.out")
    r2 = _int_add(a, act["bn_mha.out"], f2, act["ffn.out"], qm, "add_ffn", "add_ffn.out")
    f = _int_bn(r2, act["add_ffn.out"], qm, "bn_ffn", "bn_ffn.out")

    gp = act["gap.out"]
    gap_acc = (f - act["bn_ffn.out"].zero_point).sum(axis=1)
    g = requantize(gap_acc, qm.runtime.gap, gp.zero_point, gp.bitwidth, gp.signed)

    y_q = _int_linear(g, gp, qm, "l_output", "output")
    yp = act["output"]
    y = yp.scale * (y_q.astype(np.float64) - yp.zero_point)
    return y[0] if single else y


# --- fake-quant forward -------------------------------------------------------


class _FakeEngine:
    """Float dataflow with grid snapping at every planned junction.

    ``provider(junction, value)`` returns the junction's QuantParams (and may
    observe ``value`` to update running ranges during QAT). In surrogate mode
    rounding is disabled while the clamp structure (and masks) remain; the
    result is the differentiable function the straight-through gradient is
    exact for.
    """

    def __init__(
        self,
        model: FloatModel,
        plan: CascadePlan,
        provider,
        surrogate: bool = False,
    ):
        self.model = model
        self.plan = plan
        self.provider = provider
        self.surrogate = surrogate
        self.masks: dict[str, np.ndarray] = {}
        self.cache: dict = {"masks": self.masks}
        self.weight_params = _weight_params(model, plan)

    def _snap(self, value: np.ndarray, params: QuantParams, mask_key: str) -> np.ndarray:
        if self.surrogate:
            lo, hi = params.real_range()
            inside = (value >= lo) & (value <= hi)
            out = np.clip(value, lo, hi)
        else:
            out, inside = fake_quantize(value, params)
        self.masks[mask_key] = inside
        return out

    def act(self, junction: str, value: np.ndarray) -> np.ndarray:
        return self._snap(value, self.provider(junction, value), junction)

    def weight(self, name: str) -> np.ndarray:
        params = self.weight_params[f"{name}.weight"]
        return self._snap(self.model.params[f"{name}.weight"], params, f"w:{name}")

    def bias(self, name: str) -> np.ndarray:
        # the feeding junction is always computed (hence observed) before the
        # linear that consumes it, so its parameters are available here
        x_params = self.provider(LINEAR_INPUT_JUNCTION[name], None)
        params = derive_bias_params(x_params, self.weight_params[f"{name}.weight"])
        return self._snap(self.model.params[f"{name}.bias"], params, f"b:{name}")

    def linear(self, name: str, x: np.ndarray, out_junction: str) -> np.ndarray:
        w = self.weight(name)
        b = self.bias(name)
        self.cache[f"dq:{name}.weight"] = w
        return self.act(out_junction, x @ w + b)

    def residual_add(
        self, add_name: str, x1: np.ndarray, x2: np.ndarray, out_junction: str
    ) -> np.ndarray:
        params = self.provider(out_junction, x1 + x2)
        a1 = self._snap(x1, params, f"{add_name}.a1")
        a2 = self._snap(x2, params, f"{add_name}.a2")
        total = a1 + a2
        lo, hi = params.real_range()
        self.masks[out_junction] = (total >= lo) & (total <= hi)
        return np.clip(total, lo, hi)

    def bn(self, prefix: str, x: np.ndarray, mode: str, out_junction: str) -> np.ndarray:
        p = self.model.params
        if mode == "train":
            from .model import _bn_forward

            y = _bn_forward(x, self.model, prefix, "train", self.cache)
        else:
            a, b = fold_bn(
                p[f"{prefix}.gamma"],
                p[f"{prefix}.beta"],
                p[f"{prefix}.running_mean"],
                p[f"{prefix}.running_var"],
            )
            y = a * x + b
        return self.act(out_junction, y)

    def run(self, X: np.ndarray, mode: str) -> tuple[np.ndarray, dict]:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X = X[None]
        cfg = self.model.config
        if X.shape[1:] != (cfg.seq_len, cfg.input_dim):
            raise ValueError(f"input shape {X.shape[1:]} does not match the model config")
        c = self.cache

        x0 = self.act("input", X)
        h = self.linear("l_input", x0, "l_input.out")
        pe = self._snap(
            self.model.params["pos_encoding"], self.weight_params["pos_encoding"], "w:pos_encoding"
        )
        c["dq:pos_encoding"] = pe
        xe = self.residual_add("add_pe", h, np.broadcast_to(pe, h.shape), "add_pe.out")

        q = self.linear("mha.wq", xe, "mha.q")
        k = self.linear("mha.wk", xe, "mha.k")
        v = self.linear("mha.wv", xe, "mha.v")
        s_raw = (q @ k.transpose(0, 2, 1)) / math.sqrt(cfg.d_model)
        s = self.act("mha.scores", s_raw)
        p_float = softmax(s)
        p = self.act("mha.probs", p_float)
        ctx = self.act("mha.context", p @ v)
        mo = self.linear("mha.wo", ctx, "mha.out")
        r1 = self.residual_add("add_mha", xe, mo, "add_mha.out")
        a = self.bn("bn_mha", r1, mode, "bn_mha.out")

        w1 = self.weight("ffn.w1")
        b1 = self.bias("ffn.w1")
        c["dq:ffn.w1.weight"] = w1
        f1_pre = a @ w1 + b1
        f1 = self.act("ffn.hidden", np.maximum(f1_pre, 0.0))
        f2 = self.linear("ffn.w2", f1, "ffn.out")
        r2 = self.residual_add("add_ffn", a, f2, "add_ffn.out")
        f = self.bn("bn_ffn", r2, mode, "bn_ffn.out")

        g = self.act("gap.out", f.mean(axis=1))
        y = self.linear("l_output", g, "output")

        c.update(
            X=X, x0=x0, H=h, Xe=xe, Q=q, K=k, V=v, S=s, P_float=p_float, P=p,
            ctx=ctx, mha_out=mo, R1=r1, A=a, F1_pre=f1_pre, F1=f1, F2=f2,
            R2=r2, F=f, g=g, Y=y, mode=mode,
        )
        return (y[0] if single else y), c


class _StaticProvider:
    def __init__(self, calib: CalibrationSet):
        self.calib = calib

    def __call__(self, junction: str, value) -> QuantParams:
        return self.calib.require(junction)


def forward_fake_quant(
    model: FloatModel,
    combo: BitwidthCombination | None,
    calib: CalibrationSet | None,
    X: np.ndarray,
) -> np.ndarray:
    """Float arithmetic with quantize-dequantize at every planned junction.

    With ``combo`` None the simulation is disabled and this equals the plain
    float forward exactly.
    """
    if combo is None:
        return forward_float(model, X, mode="eval")[0]
    if calib is None:
        raise CalibrationError("fake-quant forward requires calibration parameters")
    plan = plan_cascade(combo)
    engine = _FakeEngine(model, plan, _StaticProvider(calib))
    return engine.run(X, mode="eval")[0]


# --- quantization-aware training ----------------------------------------------


def fake_backward(model: FloatModel, cache: dict, dY: np.ndarray) -> dict[str, np.ndarray]:
    """Straight-through gradients for a train-mode fake-quant forward.

    Every quantize-dequantize (and add clamp) contributes its recorded
    inside-range mask; rounding is treated as identity. The structure mirrors
    _FakeEngine.run in reverse.
    """
    from .training import _bn_backward

    p = model.params
    masks = cache["masks"]
    d = model.config.d_model
    n = model.config.seq_len
    grads: dict[str, np.ndarray] = {}
    dY = np.asarray(dY, dtype=np.float64)
    if dY.ndim == 1:
        dY = dY[None]

    def linear_back(name: str, x_in: np.ndarray, d_pre: np.ndarray, spec: str) -> np.ndarray:
        grads[f"{name}.weight"] = np.einsum(spec, x_in, d_pre) * masks[f"w:{name}"]
        axes = tuple(range(d_pre.ndim - 1))
        grads[f"{name}.bias"] = d_pre.sum(axis=axes) * masks[f"b:{name}"]
        return d_pre @ cache[f"dq:{name}.weight"].T

    dy = dY * masks["output"]
    dg = linear_back("l_output", cache["g"], dy, "bd,bo->do")

    dg = dg * masks["gap.out"]
    dF = np.repeat(dg[:, None, :], n, axis=1) / n

    dF = dF * masks["bn_ffn.out"]
    dR2, grads["bn_ffn.gamma"], grads["bn_ffn.beta"] = _bn_backward(
        dF, cache["bn_ffn"], p["bn_ffn.gamma"]
    )

    dR2 = dR2 * masks["add_ffn.out"]
    dA = dR2 * masks["add_ffn.a1"]
    dF2 = dR2 * masks["add_ffn.a2"]

    dF2 = dF2 * masks["ffn.out"]
    dF1 = linear_back("ffn.w2", cache["F1"], dF2, "bnf,bnd->fd")

    dF1 = dF1 * masks["ffn.hidden"]
    d_pre1 = dF1 * (cache["F1_pre"] > 0)
    grads["ffn.w1.weight"] = np.einsum("bnd,bnf->df", cache["A"], d_pre1) * masks["w:ffn.w1"]
    grads["ffn.w1.bias"] = d_pre1.sum(axis=(0, 1)) * masks["b:ffn.w1"]
    dA = dA + d_pre1 @ cache["dq:ffn.w1.weight"].T

    dA = dA * masks["bn_mha.out"]
    dR1, grads["bn_mha.gamma"], grads["bn_mha.beta"] = _bn_backward(
        dA, cache["bn_mha"], p["bn_mha.gamma"]
    )

    dR1 = dR1 * masks["add_mha.out"]
    dXe = dR1 * masks["add_mha.a1"]
    dMo = dR1 * masks["add_mha.a2"]

    dMo = dMo * masks["mha.out"]
    d_ctx = linear_back("mha.wo", cache["ctx"], dMo, "bnd,bne->de")

    d_ctx = d_ctx * masks["mha.context"]
    P, V = cache["P"], cache["V"]
    dP = d_ctx @ V.transpose(0, 2, 1)
    dV = P.transpose(0, 2, 1) @ d_ctx

    dP = dP * masks["mha.probs"]
    Pf = cache["P_float"]
    dS = Pf * (dP - (dP * Pf).sum(axis=-1, keepdims=True))

    dS = dS * masks["mha.scores"]
    scale = 1.0 / math.sqrt(d)
    Q, K = cache["Q"], cache["K"]
    dQ = (dS @ K) * scale
    dK = (dS.transpose(0, 2, 1) @ Q) * scale

    Xe = cache["Xe"]
    for name, junction, dT in (
        ("mha.wq", "mha.q", dQ),
        ("mha.wk", "mha.k", dK),
        ("mha.wv", "mha.v", dV),
    ):
        d_pre = dT * masks[junction]
        dXe = dXe + linear_back(name, Xe, d_pre, "bnd,bne->de")

    dXe = dXe * masks["add_pe.out"]
    dH = dXe * masks["add_pe.a1"]
    d_pe = dXe * masks["add_pe.a2"]
    grads["pos_encoding"] = (d_pe * masks["w:pos_encoding"]).sum(axis=0)

    dH = dH * masks["l_input.out"]
    linear_back("l_input", cache["x0"], dH, "bnm,bnd->md")

    for prefix in ("bn_mha", "bn_ffn"):
        grads[f"{prefix}.running_mean"] = np.zeros(d)
        grads[f"{prefix}.running_var"] = np.zeros(d)
    return grads


class _EmaProvider:
    """Per-junction parameter source tracking exponential moving ranges."""

    def __init__(self, ctx: "QatContext", observe: bool):
        self.ctx = ctx
        self.observe = observe

    def __call__(self, junction: str, value) -> QuantParams:
        ctx = self.ctx
        if self.observe and value is not None:
            mn, mx = float(value.min()), float(value.max())
            if junction not in ctx.ranges:
                ctx.ranges[junction] = (mn, mx)
            else:
                omn, omx = ctx.ranges[junction]
                decay = ctx.ema_decay
                ctx.ranges[junction] = (
                    decay * omn + (1 - decay) * mn,
                    decay * omx + (1 - decay) * mx,
                )
        if junction not in ctx.ranges:
            raise CalibrationError(f"no tracked range for junction {junction!r} yet")
        mn, mx = ctx.ranges[junction]
        return params_for_range(
            mn,
            mx,
            junction_bitwidth(ctx.plan, junction),
            signed=junction not in UNSIGNED_JUNCTIONS,
        )


class QatContext:
    """Drives fake-quantized forwards and straight-through backwards during
    training, tracking activation ranges by exponential moving average."""

    def __init__(
        self,
        config: ModelConfig,
        combo: BitwidthCombination,
        ema_decay: float = 0.99,
        surrogate: bool = False,
    ):
        if not 0 < ema_decay < 1:
            raise ValueError("ema_decay must be in (0, 1)")
        self.plan = plan_cascade(combo)
        _assert_accumulator_bound(config, self.plan)
        self.combo = combo
        self.ema_decay = ema_decay
        self.surrogate = surrogate
        self.ranges: dict[str, tuple[float, float]] = {}

    def forward_train(self, model: FloatModel, X: np.ndarray) -> tuple[np.ndarray, dict]:
        engine = _FakeEngine(
            model, self.plan, _EmaProvider(self, observe=True), surrogate=self.surrogate
        )
        return engine.run(X, mode="train")

    def forward_eval(self, model: FloatModel, X: np.ndarray) -> np.ndarray:
        engine = _FakeEngine(
            model, self.plan, _EmaProvider(self, observe=False), surrogate=self.surrogate
        )
        return engine.run(X, mode="eval")[0]

    def backward(self, model: FloatModel, cache: dict, dY: np.ndarray) -> dict[str, np.ndarray]:
        return fake_backward(model, cache, dY)

    def snapshot_ranges(self) -> dict[str, tuple[float, float]]:
        return dict(self.ranges)

    def restore_ranges(self, snapshot: dict[str, tuple[float, float]]) -> None:
        self.ranges = dict(snapshot)

    def frozen_ranges(self) -> dict[str, tuple[float, float]]:
        return dict(self.ranges)
