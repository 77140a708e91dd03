"""Bit-exact emulation of configurable scalar formats.

Two kinds of format are supported:

* ``float(E, S)``: IEEE 754-style binary floating point with ``E`` exponent
  bits and ``S`` stored fraction bits (sign bit, biased exponent, subnormals,
  infinities, one canonical quiet NaN).
* ``int(W, scale, zero)``: affine integer codes ``c`` in ``[0, 2**W)`` that
  stand for the real value ``scale * (c - zero)``.

All arithmetic here is exact rational arithmetic on Python integers followed
by a single round-to-nearest-even into the target format, so every result is
correctly rounded. This is the slow reference path; :mod:`hetfed.kernels`
provides vectorized equivalents for whole arrays.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Union

import mpmath

Real = Union[int, float, Fraction, "mpmath.mpf"]


class FormatError(ValueError):
    """Malformed format descriptor."""


class OutOfRange(ValueError):
    """A parameter lies outside its permitted range."""


FLOAT = "float"
AFFINE = "affine"


@dataclass(frozen=True)
class ScalarFormat:
    kind: str
    exponent_bits: int = 0
    significand_bits: int = 0
    bit_width: int = 0
    scale: float = 1.0
    zero_point: int = 0

    @classmethod
    def float_(cls, exponent_bits: int, significand_bits: int) -> "ScalarFormat":
        e, s = int(exponent_bits), int(significand_bits)
        if not 2 <= e <= 11:
            raise OutOfRange(f"exponent_bits must be in [2, 11], got {e}")
        if not 1 <= s <= 52:
            raise OutOfRange(f"significand_bits must be in [1, 52], got {s}")
        if 1 + e + s > 64:
            raise OutOfRange("format wider than 64 bits")
        return cls(FLOAT, exponent_bits=e, significand_bits=s)

    @classmethod
    def affine(cls, bit_width: int, scale: float, zero_point: int) -> "ScalarFormat":
        w = int(bit_width)
        if not 2 <= w <= 32:
            raise OutOfRange(f"bit_width must be in [2, 32], got {w}")
        scale = float(scale)
        if not (scale > 0 and math.isfinite(scale)):
            raise OutOfRange(f"scale must be positive and finite, got {scale}")
        zp = int(zero_point)
        if not 0 <= zp < (1 << w):
            raise OutOfRange(f"zero_point must be in [0, 2**{w}), got {zp}")
        return cls(AFFINE, bit_width=w, scale=scale, zero_point=zp)

    @property
    def is_float(self) -> bool:
        return self.kind == FLOAT

    @property
    def total_bits(self) -> int:
        if self.is_float:
            return 1 + self.exponent_bits + self.significand_bits
        return self.bit_width

    @property
    def nbytes(self) -> int:
        """Storage bytes per scalar."""
        return (self.total_bits + 7) // 8

    @property
    def precision(self) -> int:
        """Significand precision in bits, counting the implicit bit."""
        return self.significand_bits + 1

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def emin(self) -> int:
        return 1 - self.bias

    @property
    def emax(self) -> int:
        return self.bias

    @property
    def max_code(self) -> int:
        return (1 << self.bit_width) - 1

    @property
    def max_finite(self) -> float:
        if self.is_float:
            s = self.significand_bits
            return math.ldexp((1 << (s + 1)) - 1, self.emax - s)
        return self.scale * (self.max_code - self.zero_point)

    @property
    def descriptor(self) -> str:
        if self.is_float:
            alias = _ALIASES_REV.get((self.exponent_bits, self.significand_bits))
            return alias or f"float({self.exponent_bits},{self.significand_bits})"
        return f"int({self.bit_width},{self.scale!r},{self.zero_point})"

    def __str__(self) -> str:
        return self.descriptor


F64 = ScalarFormat.float_(11, 52)
F32 = ScalarFormat.float_(8, 23)
F16 = ScalarFormat.float_(5, 10)

_ALIASES = {"f64": F64, "f32": F32, "f16": F16}
_ALIASES_REV = {(11, 52): "f64", (8, 23): "f32", (5, 10): "f16"}

_NUM = r"\s*([-+0-9.eE]+|0x[0-9a-fA-F.pP+-]+)\s*"
_FLOAT_RE = re.compile(rf"float\({_NUM},{_NUM}\)$")
_U8_RE = re.compile(rf"u8affine\({_NUM},{_NUM}\)$")
_INT_RE = re.compile(rf"int\({_NUM},{_NUM},{_NUM}\)$")


def _to_int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise FormatError(f"expected an integer, got {text!r}")
    return int(value)


@lru_cache(maxsize=None)
def _parse(text: str) -> ScalarFormat:
    t = text.strip().lower().replace(" ", "")
    if t in _ALIASES:
        return _ALIASES[t]
    if m := _FLOAT_RE.match(t):
        return ScalarFormat.float_(_to_int(m[1]), _to_int(m[2]))
    if m := _U8_RE.match(t):
        return ScalarFormat.affine(8, float(m[1]), _to_int(m[2]))
    if m := _INT_RE.match(t):
        return ScalarFormat.affine(_to_int(m[1]), float(m[2]), _to_int(m[3]))
    raise FormatError(f"unrecognized format descriptor {text!r}")


def make_format(spec) -> ScalarFormat:
    """Build a validated format.

    ``spec`` may be a descriptor string (``f64``, ``f32``, ``f16``,
    ``float(E,S)``, ``u8affine(scale,zero)``, ``int(W,scale,zero)``), a mapping
    with the dataclass field names, or an existing :class:`ScalarFormat`.
    """
    if isinstance(spec, ScalarFormat):
        return spec
    if isinstance(spec, str):
        return _parse(spec)
    if isinstance(spec, dict):
        kind = spec.get("kind", FLOAT if "exponent_bits" in spec else AFFINE)
        try:
            if kind == FLOAT:
                return ScalarFormat.float_(spec["exponent_bits"], spec["significand_bits"])
            if kind == AFFINE:
                return ScalarFormat.affine(spec["bit_width"], spec["scale"], spec["zero_point"])
        except KeyError as exc:
            raise FormatError(f"format descriptor missing field {exc}") from None
        raise FormatError(f"unknown format kind {kind!r}")
    raise FormatError(f"cannot build a format from {spec!r}")


@dataclass(frozen=True, slots=True)
class EncodedScalar:
    bits: int
    fmt: ScalarFormat

    @property
    def value(self) -> float:
        return float(decode(self))

    def __float__(self) -> float:
        return float(decode(self))


# ---------------------------------------------------------------------------
# exact values: finite numbers are carried as (num, den) with den > 0
# ---------------------------------------------------------------------------

_NAN = "nan"
_PINF = "+inf"
_NINF = "-inf"


def _exact(x) -> tuple:
    """Turn a real into ('num', num, den, neg_zero) or a special marker."""
    if isinstance(x, EncodedScalar):
        x = decode(x)
    if isinstance(x, bool):
        x = int(x)
    if isinstance(x, int):
        return ("num", x, 1, False)
    if isinstance(x, float):
        if math.isnan(x):
            return (_NAN,)
        if math.isinf(x):
            return (_PINF,) if x > 0 else (_NINF,)
        n, d = x.as_integer_ratio()
        return ("num", n, d, x == 0 and math.copysign(1.0, x) < 0)
    if isinstance(x, Fraction):
        return ("num", x.numerator, x.denominator, False)
    if isinstance(x, mpmath.mpf):
        if mpmath.isnan(x):
            return (_NAN,)
        if mpmath.isinf(x):
            return (_PINF,) if x > 0 else (_NINF,)
        sign, man, exp, _ = x._mpf_
        man, exp = int(man), int(exp)
        man = -man if sign else man
        if exp >= 0:
            return ("num", man << exp, 1, False)
        return ("num", man, 1 << -exp, False)
    return _exact(Fraction(x))


def _floor_log2(num: int, den: int) -> int:
    """floor(log2(num / den)) for positive num, den."""
    e = num.bit_length() - den.bit_length()
    if e >= 0:
        if num < (den << e):
            e -= 1
    elif (num << -e) < den:
        e -= 1
    return e


def _div_round_even(num: int, den: int) -> int:
    """round-half-even(num / den) for num >= 0, den > 0."""
    q, r = divmod(num, den)
    twice = 2 * r
    if twice > den or (twice == den and q & 1):
        q += 1
    return q


def _encode_float(x, fmt: ScalarFormat) -> int:
    e_bits, s_bits = fmt.exponent_bits, fmt.significand_bits
    sign_shift = e_bits + s_bits
    exp_all = (1 << e_bits) - 1
    v = _exact(x)
    if v[0] == _NAN:
        return (exp_all << s_bits) | (1 << (s_bits - 1))
    if v[0] == _PINF:
        return exp_all << s_bits
    if v[0] == _NINF:
        return (1 << sign_shift) | (exp_all << s_bits)
    _, num, den, neg_zero = v
    if num == 0:
        return (1 << sign_shift) if neg_zero else 0
    return _encode_float_parts(num, den, fmt)


def _encode_affine(x, fmt: ScalarFormat) -> int:
    v = _exact(x)
    if v[0] == _NAN:
        raise ValueError("NaN has no affine integer encoding")
    if v[0] == _PINF:
        return fmt.max_code
    if v[0] == _NINF:
        return 0
    _, num, den, _ = v
    sn, sd = Fraction(fmt.scale).as_integer_ratio()
    # x / scale = num * sd / (den * sn)
    n, d = num * sd, den * sn
    if n >= 0:
        q = _div_round_even(n, d)
    else:
        q = -_div_round_even(-n, d)
    return min(max(q + fmt.zero_point, 0), fmt.max_code)


def encode(x, fmt: ScalarFormat) -> EncodedScalar:
    """Nearest value of ``fmt`` to ``x`` (round to nearest, ties to even).

    Float overflow gives a signed infinity; affine codes saturate at the
    ends of their range.
    """
    if fmt.is_float:
        return EncodedScalar(_encode_float(x, fmt), fmt)
    return EncodedScalar(_encode_affine(x, fmt), fmt)


def decode(s: EncodedScalar):
    """Exact value of an encoded scalar.

    Every float format here is a subset of binary64, so float formats decode
    to an exact Python ``float`` (keeping signed zeros, infinities and NaN).
    Affine codes decode to an exact :class:`~fractions.Fraction`.
    """
    fmt = s.fmt
    if not fmt.is_float:
        return Fraction(fmt.scale) * (s.bits - fmt.zero_point)
    s_bits, e_bits = fmt.significand_bits, fmt.exponent_bits
    sign = (s.bits >> (s_bits + e_bits)) & 1
    biased = (s.bits >> s_bits) & ((1 << e_bits) - 1)
    frac = s.bits & ((1 << s_bits) - 1)
    if biased == (1 << e_bits) - 1:
        if frac:
            return math.nan
        return -math.inf if sign else math.inf
    if biased == 0:
        mag = math.ldexp(frac, fmt.emin - s_bits)
    else:
        mag = math.ldexp(frac | (1 << s_bits), biased - fmt.bias - s_bits)
    return -mag if sign else mag


def bits_of(x: float, fmt: ScalarFormat) -> int:
    return encode(x, fmt).bits


def is_nan(s: EncodedScalar) -> bool:
    return s.fmt.is_float and math.isnan(decode(s))


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

OPS = ("add", "sub", "mul", "div")


def _special_float_op(op: str, a: float, b: float) -> float:
    # Only called when at least one operand is non-finite or the op is
    # exact-by-IEEE (zero results with signs); float arithmetic on exact
    # binary64 carriers gives the IEEE special-value result.
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if b == 0:
        if a == 0 or math.isnan(a):
            return math.nan
        return math.copysign(math.inf, a) * math.copysign(1.0, b)
    return a / b


def _exact_op(op: str, a, b):
    """Exact result of ``a op b`` as an encodable value."""
    va, vb = _exact(a), _exact(b)
    if va[0] != "num" or vb[0] != "num":
        return _special_float_op(op, float(a), float(b))
    _, na, da, za = va
    _, nb, db, zb = vb
    if op == "add" or op == "sub":
        if op == "sub":
            nb, zb = -nb, not zb if nb == 0 else zb
        num = na * db + nb * da
        if num == 0:
            # IEEE: exact zero sum is +0 except (-0) + (-0)
            return -0.0 if (na == 0 and nb == 0 and za and zb) else 0.0
        return ("num", num, da * db, False)
    if op == "mul":
        num = na * nb
        if num == 0:
            neg = (na < 0 or (na == 0 and za)) != (nb < 0 or (nb == 0 and zb))
            return -0.0 if neg else 0.0
        return ("num", num, da * db, False)
    if nb == 0:
        return _special_float_op(op, float(Fraction(na, da)) if na else (-0.0 if za else 0.0),
                                 -0.0 if zb else 0.0)
    num, den = na * db, da * nb
    if den < 0:
        num, den = -num, -den
    if num == 0:
        neg = za != (nb < 0)
        return -0.0 if neg else 0.0
    return ("num", num, den, False)


def _materialize(v):
    if isinstance(v, tuple):
        return Fraction(v[1], v[2])
    return v


def _encode_exact(v, fmt: ScalarFormat) -> EncodedScalar:
    if isinstance(v, tuple) and fmt.is_float:
        # skip the Fraction normalisation on the hot path
        return EncodedScalar(_encode_float_parts(v[1], v[2], fmt), fmt)
    return encode(_materialize(v), fmt)


def _encode_float_parts(num: int, den: int, fmt: ScalarFormat) -> int:
    s_bits = fmt.significand_bits
    sign_shift = fmt.exponent_bits + s_bits
    exp_all = (1 << fmt.exponent_bits) - 1
    sign = 0
    if num < 0:
        sign, num = 1, -num
    e = _floor_log2(num, den)
    q = max(e, fmt.emin) - s_bits
    if q >= 0:
        m = _div_round_even(num, den << q)
    else:
        m = _div_round_even(num << -q, den)
    if m >> (s_bits + 1):
        m >>= 1
        q += 1
    if m >> s_bits:
        biased = q + s_bits + fmt.bias
        if biased >= exp_all:
            return (sign << sign_shift) | (exp_all << s_bits)
        return (sign << sign_shift) | (biased << s_bits) | (m - (1 << s_bits))
    return (sign << sign_shift) | m


def arith(op: str, a: EncodedScalar, b: EncodedScalar, fmt: ScalarFormat) -> EncodedScalar:
    """Correctly rounded ``a op b`` in ``fmt``.

    Affine operands are dequantized, combined exactly, and re-encoded.
    """
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}")
    return _encode_exact(_exact_op(op, decode(a), decode(b)), fmt)


def arith_values(op: str, a, b, fmt: ScalarFormat) -> EncodedScalar:
    """Like :func:`arith` but on plain reals (each already exact in some format)."""
    return _encode_exact(_exact_op(op, a, b), fmt)


def add(a, b, fmt):
    return arith("add", a, b, fmt)


def sub(a, b, fmt):
    return arith("sub", a, b, fmt)


def mul(a, b, fmt):
    return arith("mul", a, b, fmt)


def div(a, b, fmt):
    return arith("div", a, b, fmt)


# ---------------------------------------------------------------------------
# transcendentals: evaluate with ~200 bits, round once
# ---------------------------------------------------------------------------

FUNCS = ("exp", "sigmoid", "log")
_EXT_PREC = 200


def transcend_value(fn: str, x, fmt: ScalarFormat) -> EncodedScalar:
    if fn not in FUNCS:
        raise ValueError(f"unknown function {fn!r}")
    if isinstance(x, Fraction):
        xv = x
    else:
        xv = float(x)
    if isinstance(xv, float) and math.isnan(xv):
        return encode(math.nan, fmt)
    if isinstance(xv, float) and math.isinf(xv):
        pos = xv > 0
        if fn == "sigmoid":
            return encode(1 if pos else 0, fmt)
        if fn == "exp":
            return encode(math.inf if pos else 0, fmt)
        return encode(math.inf if pos else math.nan, fmt)
    if fn == "log" and xv <= 0:
        return encode(math.nan, fmt)
    with mpmath.workprec(_EXT_PREC):
        m = mpmath.mpf(xv.numerator) / xv.denominator if isinstance(xv, Fraction) else mpmath.mpf(xv)
        if fn == "exp":
            r = mpmath.exp(m)
        elif fn == "log":
            r = mpmath.log(m)
        else:
            r = 1 / (1 + mpmath.exp(-m))
        return encode(r, fmt)


def transcend(fn: str, a: EncodedScalar, fmt: ScalarFormat) -> EncodedScalar:
    """``fn(a)`` evaluated in extended precision and rounded once into ``fmt``.

    ``log`` of a non-positive argument yields NaN; ``sigmoid(+-inf)`` is
    exactly 1 or 0.
    """
    return transcend_value(fn, decode(a), fmt)


def convert(s: EncodedScalar, to: ScalarFormat) -> EncodedScalar:
    """Re-encode ``s`` in another format."""
    if s.fmt == to:
        return s
    return encode(decode(s), to)


def ulp(x: float, fmt: ScalarFormat) -> float:
    """Spacing of ``fmt`` values at magnitude ``|x|``."""
    if not fmt.is_float:
        return fmt.scale
    x = abs(x)
    e = fmt.emin if x == 0 else max(math.frexp(x)[1] - 1, fmt.emin)
    return math.ldexp(1.0, e - fmt.significand_bits)
