"""Discrete Fourier transforms and the parameter-free Fourier token mixer.

All transforms use the unnormalised forward convention
``X_k = sum_m exp(-2*pi*i*m*k/M) x_m``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import ContractError, Tensor, _make

__all__ = [
    "ComplexVector",
    "MixerKind",
    "dft_naive",
    "fft",
    "fft_along",
    "fourier_mix",
    "fourier_mix_array",
    "is_power_of_two",
]


class MixerKind(str, enum.Enum):
    FOURIER = "fourier"
    SELF_ATTENTION = "self-attn"

    @classmethod
    def parse(cls, value: "str | MixerKind") -> "MixerKind":
        if isinstance(value, cls):
            return value
        aliases = {"fourier": cls.FOURIER, "fouriermix": cls.FOURIER,
                   "self-attn": cls.SELF_ATTENTION, "self_attn": cls.SELF_ATTENTION,
                   "selfattention": cls.SELF_ATTENTION, "self-attention": cls.SELF_ATTENTION}
        try:
            return aliases[str(value).strip().lower()]
        except KeyError:
            raise ValueError(f"unknown mixer {value!r}; expected 'fourier' or 'self-attn'") from None


@dataclass(frozen=True)
class ComplexVector:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=np.float64)
        im = np.asarray(self.im, dtype=np.float64)
        if re.shape != im.shape or re.ndim != 1:
            raise ValueError(f"re/im must be equal-length vectors, got {re.shape} and {im.shape}")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def of(cls, values) -> "ComplexVector":
        z = np.asarray(values, dtype=np.complex128).reshape(-1)
        return cls(z.real.copy(), z.imag.copy())

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def __len__(self) -> int:
        return self.re.shape[0]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _as_complex(x) -> np.ndarray:
    if isinstance(x, ComplexVector):
        return x.to_complex()
    return np.asarray(x, dtype=np.complex128).reshape(-1)


def dft_naive(x, chunk: int = 256) -> ComplexVector:
    """Direct O(M^2) evaluation of the DFT, used as the reference oracle."""
    z = _as_complex(x)
    m_len = z.shape[0]
    if m_len < 1:
        raise ContractError("dft_naive needs at least one sample")
    # products m*k stay below M^2, so int32 suffices up to M = 46340
    itype = np.int32 if m_len <= 46340 else np.int64
    m = np.arange(m_len, dtype=itype)
    # the M distinct roots of unity; m*k is reduced modulo M so phases stay exact for large M
    roots = np.exp(-2j * np.pi * m / m_len)
    out = np.empty(m_len, dtype=np.complex128)
    for start in range(0, m_len, chunk):
        k = np.arange(start, min(start + chunk, m_len), dtype=itype)
        idx = np.outer(k, m)
        np.remainder(idx, m_len, out=idx)
        out[start:start + k.size] = np.take(roots, idx) @ z
    return ComplexVector(out.real.copy(), out.imag.copy())


@lru_cache(maxsize=64)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(m: int) -> np.ndarray:
    half = m // 2
    return np.exp(-2j * np.pi * np.arange(half) / m)


def _radix2_stages(x: np.ndarray, n: int) -> np.ndarray:
    """Butterfly passes over axis 1 of a bit-reversed ``[lead, n, trail]`` array."""
    lead, _, trail = x.shape
    out = np.empty_like(x)
    m = 2
    while m <= n:
        half = m // 2
        src = x.reshape(lead, n // m, 2, half, trail)
        dst = out.reshape(lead, n // m, 2, half, trail)
        even = src[:, :, 0]
        odd = src[:, :, 1]
        if m > 2:
            odd = odd * _twiddles(m)[:, None]
        np.add(even, odd, out=dst[:, :, 0])
        np.subtract(even, odd, out=dst[:, :, 1])
        x, out = out, x
        m *= 2
    return x


def fft_along(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along one axis.

    Each butterfly stage is vectorised over every other axis, so a batch of
    transforms costs log2(M) array passes.
    """
    a = np.asarray(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    if not is_power_of_two(n):
        raise ContractError(
            f"fft length {n} is not a power of two; zero-pad the input or use dft_naive"
        )
    trail = int(np.prod(a.shape[axis + 1:], dtype=np.int64))
    if trail < 16 and a.size > n:
        # short inner extent: put the transform axis first so every
        # butterfly works on long contiguous rows
        moved = np.moveaxis(a, axis, 0)
        x = moved.reshape(1, n, -1)[:, _bit_reverse(n), :].astype(np.complex128)
        y = _radix2_stages(x, n).reshape(moved.shape)
        return np.ascontiguousarray(np.moveaxis(y, 0, axis))
    lead = a.size // (n * trail)
    x = a.reshape(lead, n, trail)[:, _bit_reverse(n), :].astype(np.complex128)
    return _radix2_stages(x, n).reshape(a.shape)


def fft(x) -> ComplexVector:
    """Radix-2 FFT of a power-of-two length vector."""
    out = fft_along(_as_complex(x))
    return ComplexVector(out.real.copy(), out.imag.copy())


def fourier_mix_array(x: np.ndarray) -> np.ndarray:
    """Real part of the 2D DFT over the last two axes (hidden first, then sequence)."""
    seq, hidden = x.shape[-2], x.shape[-1]
    if not (is_power_of_two(seq) and is_power_of_two(hidden)):
        raise ContractError(
            f"fourier_mix needs power-of-two extents, got seq={seq}, hidden={hidden}; "
            "zero-pad the input or use dft_naive"
        )
    return fft_along(fft_along(x, axis=-1), axis=-2).real.copy()


def fourier_mix(x: Tensor) -> Tensor:
    """Differentiable Fourier token mixing over ``[..., seq, hidden]``.

    The map is real-linear and symmetric (its matrix is the cosine part of
    the DFT on each axis minus the sine part), so the backward pass applies
    the same kernel to the output gradient.
    """
    y = fourier_mix_array(x.data)
    return _make(y, (x,), lambda g: (fourier_mix_array(g),))
