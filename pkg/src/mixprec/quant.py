"""Quantization parameter algebra and mixed-precision cascade rules.

Activations and weights use asymmetric affine quantization
(``real = scale * (q - zero_point)``); biases use symmetric quantization with
scale equal to the product of the input and weight scales and a bitwidth
derived from the multiply-accumulate width. Integer-only rescaling between
grids goes through a fixed-point multiplier/shift requantizer.

Rounding is half-away-from-zero everywhere, fixed globally for determinism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .components import KEY_COMPONENTS, BitwidthCombination, ComponentId

# Guard bits added on top of input+weight width for the accumulator-derived
# bias grid: 8+8 -> 18, 6+8 -> 16, 4+8 -> 14.
BIAS_GUARD_BITS = 2


class QuantScheme(Enum):
    ASYMMETRIC = "asym"
    SYMMETRIC = "sym"


def int_range(bitwidth: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(1 << (bitwidth - 1)), (1 << (bitwidth - 1)) - 1
    return 0, (1 << bitwidth) - 1


def round_half_away(x: np.ndarray | float) -> np.ndarray | float:
    """Round to nearest with ties away from zero (elementwise)."""
    if isinstance(x, np.ndarray):
        return np.trunc(x + np.copysign(0.5, x))
    return math.trunc(x + math.copysign(0.5, x))


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization parameters for one tensor."""

    scale: float
    zero_point: int
    bitwidth: int
    signed: bool
    scheme: QuantScheme

    def __post_init__(self) -> None:
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.bitwidth < 2:
            raise ValueError(f"bitwidth must be >= 2, got {self.bitwidth}")
        lo, hi = int_range(self.bitwidth, self.signed)
        if self.scheme is QuantScheme.SYMMETRIC:
            if self.zero_point != 0:
                raise ValueError("symmetric scheme requires zero_point == 0")
        elif not lo <= self.zero_point <= hi:
            raise ValueError(f"zero_point {self.zero_point} outside [{lo}, {hi}]")

    @property
    def q_min(self) -> int:
        return int_range(self.bitwidth, self.signed)[0]

    @property
    def q_max(self) -> int:
        return int_range(self.bitwidth, self.signed)[1]

    def real_range(self) -> tuple[float, float]:
        """Representable real interval [scale*(q_min-zp), scale*(q_max-zp)]."""
        return self.scale * (self.q_min - self.zero_point), self.scale * (
            self.q_max - self.zero_point
        )

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "zero_point": self.zero_point,
            "bitwidth": self.bitwidth,
            "signed": self.signed,
            "scheme": self.scheme.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(
            scale=float(d["scale"]),
            zero_point=int(d["zero_point"]),
            bitwidth=int(d["bitwidth"]),
            signed=bool(d["signed"]),
            scheme=QuantScheme(d["scheme"]),
        )


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer data plus the parameters that map it back to reals."""

    data: np.ndarray
    params: QuantParams

    def __post_init__(self) -> None:
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"data must be an integer array, got {self.data.dtype}")
        lo, hi = self.params.q_min, self.params.q_max
        if self.data.size and (self.data.min() < lo or self.data.max() > hi):
            raise ValueError(f"values outside representable range [{lo}, {hi}]")


def calibrate_asymmetric(values: np.ndarray, bitwidth: int, signed: bool) -> QuantParams:
    """Fit asymmetric parameters to observed values.

    The observed range is widened to include zero, so zero is always exactly
    representable. A degenerate (constant-zero) range yields scale 1 with the
    zero point at q_min.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot calibrate on an empty array")
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot calibrate on non-finite values")
    return params_for_range(float(values.min()), float(values.max()), bitwidth, signed)


def params_for_range(mn: float, mx: float, bitwidth: int, signed: bool) -> QuantParams:
    """Asymmetric parameters covering [min(mn,0), max(mx,0)]."""
    if not (math.isfinite(mn) and math.isfinite(mx)) or mn > mx:
        raise ValueError(f"bad range [{mn}, {mx}]")
    q_min, q_max = int_range(bitwidth, signed)
    mn, mx = min(mn, 0.0), max(mx, 0.0)
    scale = (mx - mn) / (q_max - q_min)
    if scale <= 0 or not math.isfinite(scale):  # constant input, or span underflow
        return QuantParams(1.0, q_min, bitwidth, signed, QuantScheme.ASYMMETRIC)
    raw_zp = q_min - mn / scale
    zero_point = int(round_half_away(raw_zp)) if math.isfinite(raw_zp) else q_max
    zero_point = min(max(zero_point, q_min), q_max)
    return QuantParams(scale, zero_point, bitwidth, signed, QuantScheme.ASYMMETRIC)


def derive_bias_params(x: QuantParams, w: QuantParams) -> QuantParams:
    """Symmetric bias grid on the accumulator scale of a linear layer."""
    return QuantParams(
        scale=x.scale * w.scale,
        zero_point=0,
        bitwidth=x.bitwidth + w.bitwidth + BIAS_GUARD_BITS,
        signed=True,
        scheme=QuantScheme.SYMMETRIC,
    )


def quantize(values: np.ndarray, params: QuantParams) -> QuantizedTensor:
    values = np.asarray(values, dtype=np.float64)
    q = round_half_away(values / params.scale) + params.zero_point
    q = np.clip(q, params.q_min, params.q_max).astype(np.int64)
    return QuantizedTensor(data=q, params=params)


def dequantize(t: QuantizedTensor) -> np.ndarray:
    return t.params.scale * (t.data.astype(np.float64) - t.params.zero_point)


def fake_quantize(values: np.ndarray, params: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """quantize-dequantize plus the straight-through mask.

    The mask is True where the pre-clamp integer lies inside the representable
    range, i.e. where the straight-through gradient is 1.
    """
    values = np.asarray(values, dtype=np.float64)
    raw = round_half_away(values / params.scale) + params.zero_point
    inside = (raw >= params.q_min) & (raw <= params.q_max)
    q = np.clip(raw, params.q_min, params.q_max)
    return params.scale * (q - params.zero_point), inside


# Requantizer multiplier precision: 31-bit normalized mantissa.
_MULT_BITS = 31
_MAX_SHIFT = 62  # keeps acc * multiplier + rounding inside 64-bit arithmetic


@dataclass(frozen=True)
class Requantizer:
    """Fixed-point approximation of a scale ratio: multiplier * 2**(-shift)."""

    multiplier: int
    shift: int

    def __post_init__(self) -> None:
        if not (1 << (_MULT_BITS - 1)) <= self.multiplier < (1 << _MULT_BITS):
            raise ValueError(f"multiplier {self.multiplier} not 31-bit normalized")
        if not 0 <= self.shift <= _MAX_SHIFT:
            raise ValueError(f"shift {self.shift} outside [0, {_MAX_SHIFT}]")

    @property
    def ratio(self) -> float:
        """The exactly represented ratio (multiplier has < 53 bits, so no rounding)."""
        return self.multiplier * 2.0 ** (-self.shift)


def make_requantizer(s_in: float, s_out: float) -> Requantizer:
    """Approximate s_in/s_out with relative error below 2**-29."""
    if not (s_in > 0 and s_out > 0 and math.isfinite(s_in) and math.isfinite(s_out)):
        raise ValueError(f"scales must be positive and finite, got {s_in}, {s_out}")
    ratio = s_in / s_out
    mantissa, exp = math.frexp(ratio)  # ratio = mantissa * 2**exp, mantissa in [0.5, 1)
    multiplier = round(mantissa * (1 << _MULT_BITS))
    if multiplier == (1 << _MULT_BITS):
        multiplier >>= 1
        exp += 1
    shift = _MULT_BITS - exp
    if not 0 <= shift <= _MAX_SHIFT:
        raise ValueError(
            f"scale ratio {ratio!r} outside representable dynamic range "
            f"[2**-{_MAX_SHIFT - _MULT_BITS}, 2**{_MULT_BITS})"
        )
    return Requantizer(multiplier=multiplier, shift=shift)


def _rounding_shift(product: np.ndarray, shift: int) -> np.ndarray:
    """Divide by 2**shift rounding half away from zero, in integer arithmetic."""
    if shift == 0:
        return product
    magnitude = np.abs(product)
    rounded = (magnitude + (1 << (shift - 1))) >> shift
    return np.sign(product) * rounded


def requantize(
    acc: np.ndarray | int,
    r: Requantizer,
    out_zero_point: int,
    out_bitwidth: int,
    signed: bool = True,
    offset: int | np.ndarray = 0,
) -> np.ndarray | int:
    """Rescale an integer accumulator onto an output grid.

    Computes ``round((acc + offset/2**shift) * multiplier * 2**(-shift))
    + out_zero_point`` saturated to the output range, in integer arithmetic
    with 64-bit-or-wider intermediates. ``offset`` is a pre-scaled additive
    term (units of 2**(-shift)) used for folded affine constants.
    """
    scalar = not isinstance(acc, np.ndarray)
    acc_arr = np.asarray(acc, dtype=np.int64)
    # 32-bit accumulator contract: anything larger is a planning bug upstream.
    if acc_arr.size and np.abs(acc_arr).max() > (1 << 31):
        raise AssertionError("accumulator exceeds 32-bit bound; widen the plan")
    product = acc_arr * np.int64(r.multiplier) + np.asarray(offset, dtype=np.int64)
    q = _rounding_shift(product, r.shift) + out_zero_point
    lo, hi = int_range(out_bitwidth, signed)
    q = np.clip(q, lo, hi)
    return int(q) if scalar else q


# --- bitwidth cascade -------------------------------------------------------


@dataclass(frozen=True)
class ComponentPlan:
    """Bitwidths seen by one component: inherited inputs, own weights/outputs."""

    inputs: tuple[int, ...]
    output_bitwidth: int
    weight_bitwidth: int | None = None
    bias_bitwidth: int | None = None


@dataclass(frozen=True)
class CascadePlan:
    """Resolved per-component bitwidths for a combination.

    ``linear_bias_bits`` carries the per-linear-sublayer bias widths (MHA and
    FFN contain more than one linear; later sublayers run uniformly at the
    module bitwidth, so their bias width is 2*b_module + guard).
    """

    combo: BitwidthCombination
    components: dict[ComponentId, ComponentPlan]
    linear_bias_bits: dict[str, int]

    def __getitem__(self, component: ComponentId) -> ComponentPlan:
        return self.components[component]


def plan_cascade(combo: BitwidthCombination) -> CascadePlan:
    """Propagate output bitwidths along the encoder dataflow.

    Every component's input width equals its predecessor's output width; the
    residual adds receive the skip path's width alongside the main path's.
    The model input tensor is quantized at the first component's bitwidth.
    """
    b = {comp: combo[comp] for comp in KEY_COMPONENTS}
    C = ComponentId

    def bias(b_in: int, b_w: int) -> int:
        return b_in + b_w + BIAS_GUARD_BITS

    components = {
        C.L_INPUT: ComponentPlan(
            inputs=(b[C.L_INPUT],),
            output_bitwidth=b[C.L_INPUT],
            weight_bitwidth=b[C.L_INPUT],
            bias_bitwidth=bias(b[C.L_INPUT], b[C.L_INPUT]),
        ),
        # the positional encoding table is the second addend, quantized at
        # the component's own bitwidth
        C.ADD_PE: ComponentPlan(
            inputs=(b[C.L_INPUT], b[C.ADD_PE]),
            output_bitwidth=b[C.ADD_PE],
            weight_bitwidth=b[C.ADD_PE],
        ),
        C.MHA: ComponentPlan(
            inputs=(b[C.ADD_PE],),
            output_bitwidth=b[C.MHA],
            weight_bitwidth=b[C.MHA],
            bias_bitwidth=bias(b[C.ADD_PE], b[C.MHA]),
        ),
        C.ADD_MHA: ComponentPlan(
            inputs=(b[C.ADD_PE], b[C.MHA]),  # (skip path, main path)
            output_bitwidth=b[C.ADD_MHA],
        ),
        C.BN_MHA: ComponentPlan(
            inputs=(b[C.ADD_MHA],),
            output_bitwidth=b[C.BN_MHA],
        ),
        C.FFN: ComponentPlan(
            inputs=(b[C.BN_MHA],),
            output_bitwidth=b[C.FFN],
            weight_bitwidth=b[C.FFN],
            bias_bitwidth=bias(b[C.BN_MHA], b[C.FFN]),
        ),
        C.ADD_FFN: ComponentPlan(
            inputs=(b[C.BN_MHA], b[C.FFN]),  # (skip path, main path)
            output_bitwidth=b[C.ADD_FFN],
        ),
        C.BN_FFN: ComponentPlan(
            inputs=(b[C.ADD_FFN],),
            output_bitwidth=b[C.BN_FFN],
        ),
        C.GAP: ComponentPlan(
            inputs=(b[C.BN_FFN],),
            output_bitwidth=b[C.GAP],
        ),
        C.L_OUTPUT: ComponentPlan(
            inputs=(b[C.GAP],),
            output_bitwidth=b[C.L_OUTPUT],
            weight_bitwidth=b[C.L_OUTPUT],
            bias_bitwidth=bias(b[C.GAP], b[C.L_OUTPUT]),
        ),
    }

    # Sub-layers after the first inside a module run uniformly at the module
    # bitwidth, so only the first linear of MHA/FFN sees a mixed input.
    linear_bias_bits = {
        "l_input": bias(b[C.L_INPUT], b[C.L_INPUT]),
        "mha.wq": bias(b[C.ADD_PE], b[C.MHA]),
        "mha.wk": bias(b[C.ADD_PE], b[C.MHA]),
        "mha.wv": bias(b[C.ADD_PE], b[C.MHA]),
        "mha.wo": bias(b[C.MHA], b[C.MHA]),
        "ffn.w1": bias(b[C.BN_MHA], b[C.FFN]),
        "ffn.w2": bias(b[C.FFN], b[C.FFN]),
        "l_output": bias(b[C.GAP], b[C.L_OUTPUT]),
    }
    return CascadePlan(combo=combo, components=components, linear_bias_bits=linear_bias_bits)
