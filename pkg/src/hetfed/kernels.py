"""Vectorized arithmetic over whole arrays of one scalar format.

Each kernel holds values in a numpy *carrier* array whose elements are
exactly the format's values:

* binary64/32/16 use numpy's own IEEE dtypes, whose elementwise operations
  are already correctly rounded (half precision is computed in single and
  rounded once, which is exact for +, -, *, / since 24 >= 2*11 + 2).
* any other ``float(E, S)`` is carried in float64 and re-rounded after each
  operation; the few results that land exactly on a rounding midpoint of the
  target are resolved exactly (an error-free sum for add/sub, the scalar
  softfloat otherwise).
* affine integer formats carry their dequantized values in float64.

Reductions are strictly sequential in ascending index order, so results do
not depend on BLAS, SIMD width or thread count. Transcendentals of narrow
formats are evaluated in float64 and rounded once; the binary64 sigmoid
carries its sum and reciprocal in double-double and is faithfully rounded
(within one ulp), which keeps the hot path fast.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import _jit, numfmt
from .numfmt import ScalarFormat

_NATIVE = {
    (11, 52): np.float64,
    (8, 23): np.float32,
    (5, 10): np.float16,
}


class Kernel:
    fmt: ScalarFormat
    dtype = np.float64

    def round(self, x) -> np.ndarray:
        raise NotImplementedError

    def scalar(self, x) -> np.ndarray:
        """A 0-d carrier holding ``x`` rounded into the format."""
        return self.round(np.asarray(x, dtype=np.float64))

    def add(self, a, b):
        raise NotImplementedError

    def sub(self, a, b):
        return self.add(a, -np.asarray(b))

    def mul(self, a, b):
        raise NotImplementedError

    def div(self, a, b):
        raise NotImplementedError

    def sigmoid(self, x):
        raise NotImplementedError

    def log(self, x):
        raise NotImplementedError

    def exp(self, x):
        raise NotImplementedError

    def maximum(self, a, b):
        return np.maximum(a, b)

    def minimum(self, a, b):
        return np.minimum(a, b)

    def dot(self, a, w):
        """``a @ w`` with each output summed over the inner index in ascending order."""
        acc = self.mul(a[:, 0:1], w[0:1, :])
        for k in range(1, a.shape[1]):
            acc = self.add(acc, self.mul(a[:, k:k + 1], w[k:k + 1, :]))
        return acc

    def sum(self, x, axis: int = 0):
        """Sequential sum along ``axis`` (first element, then +x[1], +x[2], ...)."""
        x = np.moveaxis(np.asarray(x), axis, 0)
        acc = x[0]
        for i in range(1, x.shape[0]):
            acc = self.add(acc, x[i])
        return acc

    def outer_sum(self, a, d):
        """``sum_s a[s, j] * d[s, k]`` over samples ``s`` in ascending order."""
        return self.sum(self.mul(a[:, :, None], d[:, None, :]), axis=0)


class NativeKernel(Kernel):
    def __init__(self, fmt: ScalarFormat, dtype):
        self.fmt = fmt
        self.dtype = dtype
        self._wide = np.longdouble if dtype is np.float64 else np.float64
        self._compiled = dtype is not np.float16

    def round(self, x):
        return np.asarray(x).astype(self.dtype, copy=False)

    def add(self, a, b):
        return np.add(a, b, dtype=self.dtype)

    def sub(self, a, b):
        return np.subtract(a, b, dtype=self.dtype)

    def mul(self, a, b):
        return np.multiply(a, b, dtype=self.dtype)

    def div(self, a, b):
        return np.divide(a, b, dtype=self.dtype)

    def _widen(self, x):
        return np.asarray(x).astype(self._wide)

    def sigmoid(self, x):
        if self.dtype is np.float64:
            return _jit.sigmoid_f64(np.asarray(x, dtype=np.float64))
        w = np.asarray(x).astype(np.float64)
        return (1 / (1 + np.exp(-w))).astype(self.dtype)

    def exp(self, x):
        return np.exp(self._widen(x)).astype(self.dtype)

    def log(self, x):
        w = self._widen(x)
        out = np.log(np.where(w > 0, w, 1)).astype(self.dtype)
        return np.where(w > 0, out, np.nan).astype(self.dtype)

    def sum(self, x, axis: int = 0):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[axis] == 0:
            raise ValueError("empty reduction")
        if self._compiled and x.ndim <= 2:
            x2 = np.moveaxis(x, axis, 0)
            flat = np.ascontiguousarray(x2.reshape(x2.shape[0], -1))
            return _jit.seq_colsum(flat).reshape(x2.shape[1:])
        # accumulate is sequential by definition, unlike reduce
        acc = np.add.accumulate(x, axis=axis, dtype=self.dtype)
        return np.take(acc, -1, axis=axis)

    def dot(self, a, w):
        if self._compiled:
            return _jit.seq_dot(np.ascontiguousarray(a, dtype=self.dtype), np.ascontiguousarray(w, dtype=self.dtype))
        prods = np.multiply(a[:, :, None], w[None, :, :], dtype=self.dtype)
        return self.sum(prods, axis=1)

    def outer_sum(self, a, d):
        if self._compiled:
            return _jit.seq_outer(np.ascontiguousarray(a, dtype=self.dtype), np.ascontiguousarray(d, dtype=self.dtype))
        return super().outer_sum(a, d)


def round_float_array(x, exponent_bits: int, significand_bits: int, err=None):
    """Round ``x`` (float64 or long double) to ``float(E, S)``, returning float64.

    ``err`` is an optional exact residual (true value = x + err); it only
    matters when ``x`` sits exactly on a midpoint between two target values.
    Returns ``(rounded, unresolved_midpoints)``.
    """
    x = np.asarray(x)
    out = np.array(x, dtype=np.float64)
    bias = (1 << (exponent_bits - 1)) - 1
    emin = 1 - bias
    unresolved = np.zeros(x.shape, dtype=bool)
    nz = np.isfinite(x) & (x != 0)
    if nz.any():
        xs = x[nz]
        _, e = np.frexp(xs)
        q = (np.maximum(e.astype(np.int64) - 1, emin) - significand_bits).astype(np.int32)
        t = np.ldexp(xs, -q)
        y = np.rint(t)
        fl = np.floor(t)
        mid = (t - fl) == 0.5
        if mid.any():
            if err is None:
                unresolved[nz] = mid
            else:
                r = np.asarray(err)[nz]
                y = np.where(mid & (r > 0), fl + 1, np.where(mid & (r < 0), fl, y))
        vals = np.ldexp(y.astype(np.float64), q)
        max_finite = np.ldexp(float((1 << (significand_bits + 1)) - 1), bias - significand_bits)
        vals = np.where(np.abs(vals) > max_finite, np.copysign(np.inf, vals), vals)
        out[nz] = vals
    return out, unresolved


class SoftFloatKernel(Kernel):
    """Arbitrary ``float(E, S)`` carried in float64."""

    def __init__(self, fmt: ScalarFormat):
        self.fmt = fmt
        self.dtype = np.float64
        self._e = fmt.exponent_bits
        self._s = fmt.significand_bits
        self._wide = np.longdouble if fmt.precision > 26 else np.float64

    def _round(self, x, err=None):
        return round_float_array(x, self._e, self._s, err)

    def round(self, x):
        x = np.asarray(x)
        if x.dtype == np.longdouble:
            return self._round(x)[0]
        out, mid = self._round(x.astype(np.float64))
        return out

    def _fallback(self, op, a, b, out, mask):
        if mask.any():
            a, b = np.broadcast_arrays(a, b)
            fmt = self.fmt
            for idx in zip(*np.nonzero(mask)):
                r = numfmt.arith_values(op, float(a[idx]), float(b[idx]), fmt)
                out[idx] = numfmt.decode(r)
        return out

    def add(self, a, b):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        s = a + b
        # Knuth two-sum: a + b == s + err exactly
        bb = s - a
        err = (a - (s - bb)) + (b - bb)
        err = np.where(np.isfinite(err), err, 0.0)
        return self._round(s, err)[0]

    def sub(self, a, b):
        return self.add(a, -np.asarray(b, dtype=np.float64))

    def mul(self, a, b):
        s = np.multiply(a, b, dtype=np.float64)
        out, mid = self._round(s)
        if self.fmt.precision <= 26:
            # product of two <=26-bit significands is exact in binary64
            # unless it fell into binary64's subnormal range
            mid &= np.abs(s) < 2.0**-1021
        return self._fallback("mul", a, b, out, mid)

    def div(self, a, b):
        s = np.divide(a, b, dtype=np.float64)
        out, mid = self._round(s)
        return self._fallback("div", a, b, out, mid)

    def _via_wide(self, fn, x):
        w = np.asarray(x).astype(self._wide)
        return self._round(fn(w))[0]

    def sigmoid(self, x):
        return self._via_wide(lambda w: 1 / (1 + np.exp(-w)), x)

    def exp(self, x):
        return self._via_wide(np.exp, x)

    def log(self, x):
        x = np.asarray(x, dtype=np.float64)
        pos = x > 0
        out = self._via_wide(np.log, np.where(pos, x, 1.0))
        return np.where(pos, out, np.nan)


class AffineKernel(Kernel):
    """Affine integer format; the carrier holds dequantized float64 values."""

    def __init__(self, fmt: ScalarFormat):
        self.fmt = fmt
        self.dtype = np.float64

    def codes(self, x):
        """Integer codes of real values (nearest, ties to even, saturating)."""
        x = np.asarray(x, dtype=np.float64)
        if np.isnan(x).any():
            raise ValueError("NaN has no affine integer encoding")
        fmt = self.fmt
        with np.errstate(over="ignore", invalid="ignore"):
            t = x / fmt.scale
            c = np.rint(t)
            near = np.abs(np.abs(t - np.floor(t)) - 0.5) < 1e-6
        c = np.clip(c + fmt.zero_point, 0, fmt.max_code)
        if near.any():
            c = np.array(c)
            for idx in zip(*np.nonzero(near)):
                c[idx] = numfmt.encode(float(x[idx]), fmt).bits
        return c.astype(np.int64)

    def dequantize(self, codes):
        return (np.asarray(codes, dtype=np.float64) - self.fmt.zero_point) * self.fmt.scale

    def round(self, x):
        return self.dequantize(self.codes(x))

    def _exact(self, op, a, b):
        s = {
            "add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide,
        }[op](a, b, dtype=np.float64)
        with np.errstate(over="ignore", invalid="ignore"):
            t = s / self.fmt.scale
            near = np.abs(np.abs(t - np.floor(t)) - 0.5) < 1e-6
        out = self.round(np.where(near, 0.0, s))
        if near.any():
            a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
            for idx in zip(*np.nonzero(near)):
                r = numfmt.arith_values(op, _affine_exact(a[idx], self.fmt), _affine_exact(b[idx], self.fmt), self.fmt)
                out[idx] = float(numfmt.decode(r))
        return out

    def add(self, a, b):
        return self._exact("add", a, b)

    def sub(self, a, b):
        return self._exact("sub", a, b)

    def mul(self, a, b):
        return self._exact("mul", a, b)

    def div(self, a, b):
        return self._exact("div", a, b)

    def sigmoid(self, x):
        return self.round(1 / (1 + np.exp(-np.asarray(x, dtype=np.float64))))

    def exp(self, x):
        return self.round(np.exp(np.asarray(x, dtype=np.float64)))

    def log(self, x):
        x = np.asarray(x, dtype=np.float64)
        if (x <= 0).any():
            raise ValueError("log of a non-positive value has no affine encoding")
        return self.round(np.log(x))


def _affine_exact(v: float, fmt: ScalarFormat):
    """Exact dequantized value behind a float64 carrier of an affine code."""
    return numfmt.decode(numfmt.encode(float(v), fmt))


@lru_cache(maxsize=None)
def kernel_for(fmt: ScalarFormat) -> Kernel:
    if not fmt.is_float:
        return AffineKernel(fmt)
    native = _NATIVE.get((fmt.exponent_bits, fmt.significand_bits))
    if native is not None:
        return NativeKernel(fmt, native)
    return SoftFloatKernel(fmt)


def to_bits(values, fmt: ScalarFormat) -> np.ndarray:
    """Bit patterns (uint64) of carrier values."""
    values = np.asarray(values)
    if not fmt.is_float:
        return kernel_for(fmt).codes(values).astype(np.uint64)
    native = _NATIVE.get((fmt.exponent_bits, fmt.significand_bits))
    if native is not None:
        v = values.astype(native)
        v = np.where(np.isnan(v), native(np.nan), v)
        raw = v.view({8: np.uint64, 4: np.uint32, 2: np.uint16}[v.itemsize])
        nan_bits = _canonical_nan(fmt)
        return np.where(np.isnan(v), np.uint64(nan_bits), raw.astype(np.uint64))
    flat = values.astype(np.float64).ravel()
    return np.array([numfmt.bits_of(float(x), fmt) for x in flat], dtype=np.uint64).reshape(values.shape)


def from_bits(bits, fmt: ScalarFormat) -> np.ndarray:
    """Carrier values from bit patterns."""
    bits = np.asarray(bits, dtype=np.uint64)
    if not fmt.is_float:
        return kernel_for(fmt).dequantize(bits.astype(np.int64))
    native = _NATIVE.get((fmt.exponent_bits, fmt.significand_bits))
    if native is not None:
        size = np.dtype(native).itemsize
        return bits.astype({8: np.uint64, 4: np.uint32, 2: np.uint16}[size]).view(native)
    flat = bits.ravel()
    return np.array(
        [numfmt.decode(numfmt.EncodedScalar(int(b), fmt)) for b in flat], dtype=np.float64
    ).reshape(bits.shape)


def _canonical_nan(fmt: ScalarFormat) -> int:
    return numfmt.encode(float("nan"), fmt).bits
