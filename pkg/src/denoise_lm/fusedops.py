"""Binary16 emulation and fp32 "stable op" kernels, unfused vs fused.

Half values are carried as ``uint16`` bit patterns. The unfused path follows
the framework recipe: cast the whole input to an fp32 buffer, run the op into
another fp32 buffer, cast back. The fused path streams each row, keeping the
fp32 intermediates in scalars, and only allocates the fp16 output.

Both paths run the same scalar fp32 operations in the same order, so their
outputs are bit-identical. Exponentials are evaluated in double precision
and rounded once to fp32 so an independent numpy reference can match them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numba
import numpy as np
from llvmlite import ir
from numba.core import types
from numba.extending import intrinsic

from .rng import mix64

OPS = ("identity", "softmax", "softmax-dropout", "layernorm")


@dataclass
class AllocCounter:
    """Full-length fp32 intermediates allocated by one kernel call."""

    n_buffers: int = 0
    n_bytes: int = 0

    def reset(self):
        self.n_buffers = 0
        self.n_bytes = 0

    def alloc(self, n: int) -> np.ndarray:
        buf = np.empty(n, dtype=np.float32)
        self.n_buffers += 1
        self.n_bytes += buf.nbytes
        return buf


# binary16 <-> binary32 ------------------------------------------------------------------


@intrinsic
def _f32_as_u32(typingctx, x):
    sig = types.uint32(types.float32)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], ir.IntType(32))

    return sig, codegen


@intrinsic
def _u32_as_f32(typingctx, x):
    sig = types.float32(types.uint32)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], ir.FloatType())

    return sig, codegen


@numba.njit(cache=True)
def _h2f(h):
    return _u32_as_f32(_half_to_f32bits(h))


@numba.njit(cache=True)
def _f2h(x):
    return _f32bits_to_half(_f32_as_u32(x))


@numba.njit(cache=True)
def _f32bits_to_half(f):
    f = np.uint32(f)
    sign = np.uint16((f >> np.uint32(16)) & np.uint32(0x8000))
    exp = f & np.uint32(0x7F800000)
    man = f & np.uint32(0x007FFFFF)
    if exp == np.uint32(0x7F800000):
        if man != np.uint32(0):
            # NaN: keep the top payload bits, force the quiet bit
            return np.uint16(sign | np.uint16(0x7E00) | np.uint16(man >> np.uint32(13)))
        return np.uint16(sign | np.uint16(0x7C00))
    if exp >= np.uint32(0x47800000):
        return np.uint16(sign | np.uint16(0x7C00))
    if exp <= np.uint32(0x38000000):
        # result is subnormal or zero
        if exp < np.uint32(0x33000000):
            return sign
        e = exp >> np.uint32(23)
        sig = man | np.uint32(0x00800000)
        shift = np.uint32(126) - e  # 14..24
        half_sig = sig >> shift
        rem = sig & ((np.uint32(1) << shift) - np.uint32(1))
        halfway = np.uint32(1) << (shift - np.uint32(1))
        if rem > halfway or (rem == halfway and (half_sig & np.uint32(1)) == np.uint32(1)):
            half_sig += np.uint32(1)
        return np.uint16(sign | np.uint16(half_sig))
    # normal: rebias exponent, round 23-bit mantissa to 10 bits (nearest even)
    h = ((exp - np.uint32(0x38000000)) >> np.uint32(13)) | (man >> np.uint32(13))
    rem = man & np.uint32(0x1FFF)
    if rem > np.uint32(0x1000) or (rem == np.uint32(0x1000) and (h & np.uint32(1)) == np.uint32(1)):
        h += np.uint32(1)  # may carry into the exponent, up to infinity
    return np.uint16(sign | np.uint16(h))


@numba.njit(cache=True)
def _half_to_f32bits(h):
    h = np.uint32(h)
    sign = (h & np.uint32(0x8000)) << np.uint32(16)
    exp = h & np.uint32(0x7C00)
    if exp != np.uint32(0) and exp != np.uint32(0x7C00):
        # normal numbers: rebias exponent by 127 - 15
        return sign | (((h & np.uint32(0x7FFF)) + np.uint32(0x1C000)) << np.uint32(13))
    man = h & np.uint32(0x03FF)
    if exp == np.uint32(0x7C00):
        if man != np.uint32(0):
            return sign | np.uint32(0x7FC00000) | (man << np.uint32(13))
        return sign | np.uint32(0x7F800000)
    if exp == np.uint32(0):
        if man == np.uint32(0):
            return sign
        # normalize a subnormal
        e = np.uint32(113)
        while (man & np.uint32(0x0400)) == np.uint32(0):
            man <<= np.uint32(1)
            e -= np.uint32(1)
    man &= np.uint32(0x03FF)
    return sign | (e << np.uint32(23)) | (man << np.uint32(13))


@numba.njit(cache=True)
def _to_half_array(x, out):
    bits = x.view(np.uint32)
    for i in range(x.size):
        out[i] = _f32bits_to_half(bits[i])


@numba.njit(cache=True)
def _to_f32_array(h, out):
    bits = out.view(np.uint32)
    for i in range(h.size):
        bits[i] = _half_to_f32bits(h[i])


def f32_to_half(x) -> np.ndarray:
    """Round fp32 values to binary16 (nearest even); returns uint16 bit patterns."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    out = np.empty(x.size, dtype=np.uint16)
    _to_half_array(x.reshape(-1), out)
    return out.reshape(x.shape)


def half_to_f32(h) -> np.ndarray:
    """Widen binary16 bit patterns to fp32 (exact)."""
    h = np.ascontiguousarray(np.asarray(h, dtype=np.uint16))
    out = np.empty(h.size, dtype=np.float32)
    _to_f32_array(h.reshape(-1), out)
    return out.reshape(h.shape)


# counter-based dropout draw -------------------------------------------------------------


@numba.njit(cache=True)
def _uniform(key, index):
    """Uniform fp32 in [0, 1) from splitmix64 of ``key + index``; 24 random bits."""
    z = np.uint64(key) + np.uint64(index) * np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return np.float32(np.float64(z >> np.uint64(40)) * (1.0 / 16777216.0))


def dropout_key(seed: int, step: int = 0, op_id: int = 0) -> int:
    return mix64(seed, step, op_id)


# scalar fp32 building blocks shared by both paths ---------------------------------------


@numba.njit(cache=True)
def _exp32(x):
    return np.float32(math.exp(np.float64(x)))


@numba.njit(cache=True)
def _online_max_sum(m, s, v):
    """One step of the streaming max / sum-of-exp recurrence."""
    if v > m:
        return v, s * _exp32(m - v) + np.float32(1.0)
    return m, s + _exp32(v - m)


# unfused: whole-buffer stages --------------------------------------------------------------


@numba.njit(cache=True)
def _cast_in(h, t1):
    bits = t1.view(np.uint32)
    for i in range(h.size):
        bits[i] = _half_to_f32bits(h[i])


@numba.njit(cache=True)
def _cast_out(t, y):
    bits = t.view(np.uint32)
    for i in range(t.size):
        y[i] = _f32bits_to_half(bits[i])


@numba.njit(cache=True)
def _copy(t1, t2):
    for i in range(t1.size):
        t2[i] = t1[i]


@numba.njit(cache=True)
def _softmax_rows(t1, t2, width):
    for r in range(t1.size // width):
        base = r * width
        m = t1[base]
        s = np.float32(1.0)
        for j in range(1, width):
            m, s = _online_max_sum(m, s, t1[base + j])
        for j in range(width):
            t2[base + j] = _exp32(t1[base + j] - m) / s


@numba.njit(cache=True)
def _dropout(t2, t3, p, scale, key):
    for i in range(t2.size):
        if _uniform(key, i) >= p:
            t3[i] = t2[i] * scale
        else:
            t3[i] = np.float32(0.0)


@numba.njit(cache=True)
def _layernorm_rows(t1, t2, width, gamma, beta, eps):
    n = np.float32(width)
    for r in range(t1.size // width):
        base = r * width
        s = np.float32(0.0)
        for j in range(width):
            s += t1[base + j]
        mean = s / n
        q = np.float32(0.0)
        for j in range(width):
            d = t1[base + j] - mean
            q += d * d
        inv = np.float32(1.0) / np.float32(math.sqrt(q / n + eps))
        for j in range(width):
            t2[base + j] = (t1[base + j] - mean) * inv * gamma[j] + beta[j]


# fused: one streaming kernel per op, fp32 intermediates live in registers ----------------


@numba.njit(cache=True)
def _fused_identity(h, y):
    for i in range(h.size):
        y[i] = _f2h(_h2f(h[i]))


@numba.njit(cache=True)
def _fused_softmax(h, y, width, dropout, p, scale, key):
    for r in range(h.size // width):
        base = r * width
        m = _h2f(h[base])
        s = np.float32(1.0)
        for j in range(1, width):
            m, s = _online_max_sum(m, s, _h2f(h[base + j]))
        for j in range(width):
            v = _exp32(_h2f(h[base + j]) - m) / s
            if dropout:
                if _uniform(key, base + j) >= p:
                    v = v * scale
                else:
                    v = np.float32(0.0)
            y[base + j] = _f2h(v)


@numba.njit(cache=True)
def _fused_layernorm(h, y, width, gamma, beta, eps):
    n = np.float32(width)
    for r in range(h.size // width):
        base = r * width
        s = np.float32(0.0)
        for j in range(width):
            s += _h2f(h[base + j])
        mean = s / n
        q = np.float32(0.0)
        for j in range(width):
            d = _h2f(h[base + j]) - mean
            q += d * d
        inv = np.float32(1.0) / np.float32(math.sqrt(q / n + eps))
        for j in range(width):
            y[base + j] = _f2h((_h2f(h[base + j]) - mean) * inv * gamma[j] + beta[j])


# public kernels -------------------------------------------------------------------------------


@dataclass
class OpSpec:
    """Which op to run and its parameters. ``width`` is the row length for row ops."""

    op: str
    width: int | None = None
    p: float = 0.1
    key: int = 0
    eps: float = 1e-5
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None

    def resolve(self, n: int):
        if self.op not in OPS:
            raise ValueError(f"unknown op {self.op!r}; expected one of {OPS}")
        width = n if self.width is None else self.width
        if width <= 0 or n % width:
            raise ValueError(f"input length {n} is not a multiple of row width {width}")
        gamma = np.ones(width, np.float32) if self.gamma is None else np.asarray(self.gamma, np.float32)
        beta = np.zeros(width, np.float32) if self.beta is None else np.asarray(self.beta, np.float32)
        if not 0.0 <= self.p < 1.0:
            raise ValueError("dropout p must be in [0, 1)")
        return width, gamma, beta


def _prep(x):
    x = np.ascontiguousarray(np.asarray(x, dtype=np.uint16)).reshape(-1)
    return x


def unfused_stable_op(x, spec: OpSpec, counter: AllocCounter | None = None):
    """Cast all of ``x`` to fp32, apply the op buffer-to-buffer, cast back."""
    counter = counter if counter is not None else AllocCounter()
    counter.reset()
    h = _prep(x)
    n = h.size
    width, gamma, beta = spec.resolve(n)
    t1 = counter.alloc(n)
    _cast_in(h, t1)
    t2 = counter.alloc(n)
    if spec.op == "identity":
        _copy(t1, t2)
    elif spec.op == "layernorm":
        _layernorm_rows(t1, t2, width, gamma, beta, np.float32(spec.eps))
    else:
        _softmax_rows(t1, t2, width)
        if spec.op == "softmax-dropout":
            t3 = counter.alloc(n)
            _dropout(t2, t3, np.float32(spec.p), np.float32(1.0 / (1.0 - spec.p)), np.uint64(spec.key))
            t2 = t3
    y = np.empty(n, dtype=np.uint16)
    _cast_out(t2, y)
    return y, counter


def fused_stable_op(x, spec: OpSpec, counter: AllocCounter | None = None):
    """Cast, compute and round element by element; allocates only the fp16 output."""
    counter = counter if counter is not None else AllocCounter()
    counter.reset()
    h = _prep(x)
    n = h.size
    width, gamma, beta = spec.resolve(n)
    y = np.empty(n, dtype=np.uint16)
    if spec.op == "identity":
        _fused_identity(h, y)
    elif spec.op == "layernorm":
        _fused_layernorm(h, y, width, gamma, beta, np.float32(spec.eps))
    else:
        drop = spec.op == "softmax-dropout"
        _fused_softmax(h, y, width, drop, np.float32(spec.p), np.float32(1.0 / (1.0 - spec.p)), np.uint64(spec.key))
    return y, counter


def max_bit_diff(a, b) -> int:
    a = np.asarray(a, dtype=np.uint16).astype(np.int64)
    b = np.asarray(b, dtype=np.uint16).astype(np.int64)
    return int(np.abs(a - b).max()) if a.size else 0


SPECIAL_HALVES = np.array(
    [0x0000, 0x8000, 0x0001, 0x8001, 0x03FF, 0x83FF, 0x0400, 0x8400, 0x7BFF, 0xFBFF, 0x7BFE, 0xFBFE, 0x3C00, 0xBC00],
    dtype=np.uint16,
)  # +-0, smallest / largest subnormal, smallest normal, +-65504, +-65472, +-1


def random_half_input(n: int, rng: np.random.Generator, low=-4.0, high=4.0, with_specials=False) -> np.ndarray:
    """Uniform halves in ``[low, high)``; optionally 10% drawn from edge cases."""
    x = f32_to_half(rng.uniform(low, high, n).astype(np.float32))
    if with_specials:
        at = rng.random(n) < 0.1
        x[at] = rng.choice(SPECIAL_HALVES, size=int(at.sum()))
        # a sprinkling of random subnormals
        sub = rng.random(n) < 0.02
        x[sub] = rng.integers(1, 0x400, size=int(sub.sum()), dtype=np.uint16) | (
            rng.integers(0, 2, size=int(sub.sum()), dtype=np.uint16) << np.uint16(15))
    return x


def bench(op: str, n: int, reps: int = 5, width: int = 1024, seed: int = 0) -> dict:
    """Median wall time per call for both paths, bytes allocated, and bit agreement."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    width = min(width, n)
    rng = np.random.default_rng(seed)
    x = random_half_input(n, rng)
    spec = OpSpec(op, width=width, key=dropout_key(seed))
    # warmup also triggers JIT compilation
    yu, cu = unfused_stable_op(x, spec)
    yf, cf = fused_stable_op(x, spec)
    times = {"unfused": [], "fused": []}
    for _ in range(reps):
        for name, fn in (("unfused", unfused_stable_op), ("fused", fused_stable_op)):
            t0 = time.perf_counter()
            fn(x, spec)
            times[name].append(time.perf_counter() - t0)
    ns_u = float(np.median(times["unfused"]) * 1e9)
    ns_f = float(np.median(times["fused"]) * 1e9)
    out_bytes = n * 2
    return {
        "op": op,
        "n": n,
        "width": width,
        "reps": reps,
        "ns_per_call_unfused": ns_u,
        "ns_per_call_fused": ns_f,
        "speedup_fused_over_unfused": ns_u / ns_f,
        "intermediate_buffers_unfused": cu.n_buffers,
        "intermediate_buffers_fused": cf.n_buffers,
        "bytes_unfused": cu.n_bytes + out_bytes,
        "bytes_fused": cf.n_bytes + out_bytes,
        "bytes_ratio_unfused_over_fused": (cu.n_bytes + out_bytes) / (cf.n_bytes + out_bytes),
        "max_bit_diff": max_bit_diff(yu, yf),
    }
