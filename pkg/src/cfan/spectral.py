"""Frequency-varying filtering of feature maps.

The pipeline per channel is: 2-D FFT, centre the spectrum, multiply by a real
mask, undo the centring, inverse FFT, keep the real part. Masks are weighted
sums of concentric square band templates whose weights come from an
exponential-power profile with an adjustable shape parameter ``p``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, record

P_MIN = 0.2
P_MAX = 20.0


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def _check_pow2(h: int, w: int) -> None:
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"spatial size {h}x{w} is not a power of two")


@functools.lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@functools.lru_cache(maxsize=None)
def _twiddles(size: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(size // 2) / size)


def _complex_dtype(x: np.ndarray):
    return np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128


def fft_axis(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unnormalized radix-2 decimation-in-time FFT along one axis."""
    z = np.asarray(z)
    axis = axis % z.ndim
    n = z.shape[axis]
    if not _is_pow2(n):
        raise ValueError(f"length {n} is not a power of two")
    ctype = _complex_dtype(z)
    pre = int(np.prod(z.shape[:axis], dtype=np.int64))
    post = int(np.prod(z.shape[axis + 1:], dtype=np.int64))
    x = z.reshape(pre, n, post)[:, _bit_reversal(n), :].astype(ctype, copy=False)
    out = np.empty_like(x)
    size = 2
    while size <= n:
        half = size // 2
        xv = x.reshape(pre, n // size, size, post)
        ov = out.reshape(pre, n // size, size, post)
        a = xv[:, :, :half, :]
        b = xv[:, :, half:, :] * _twiddles(size).astype(ctype)[:, None]
        np.add(a, b, out=ov[:, :, :half, :])
        np.subtract(a, b, out=ov[:, :, half:, :])
        x, out = out, x
        size *= 2
    return x.reshape(z.shape)


def fft1d(z: np.ndarray) -> np.ndarray:
    """Unnormalized radix-2 FFT along the last axis."""
    return fft_axis(z, -1)


@dataclass
class SpectrumGrid:
    """Complex spectrum of one or more ``H x W`` grids (last two axes)."""

    values: np.ndarray
    centered: bool = False

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag


def fft2d(x: np.ndarray) -> SpectrumGrid:
    x = np.asarray(x)
    _check_pow2(*x.shape[-2:])
    return SpectrumGrid(fft_axis(fft_axis(x, -1), -2), centered=False)


def ifft2d(z: SpectrumGrid) -> tuple[np.ndarray, float]:
    """Inverse transform; returns the real part and the largest |imag| left over."""
    if z.centered:
        raise ValueError("ifft2d needs a decentred spectrum; call unshift first")
    h, w = z.values.shape[-2:]
    _check_pow2(h, w)
    y = fft_axis(fft_axis(np.conj(z.values), -1), -2)
    y = np.conj(y) / (h * w)
    residual = float(np.abs(y.imag).max()) if y.size else 0.0
    return y.real, residual


def shift(z: SpectrumGrid) -> SpectrumGrid:
    """Move the zero-frequency bin to ``(H // 2, W // 2)``."""
    if z.centered:
        raise ValueError("spectrum is already centred")
    h, w = z.values.shape[-2:]
    return SpectrumGrid(np.roll(z.values, (h // 2, w // 2), axis=(-2, -1)), centered=True)


def unshift(z: SpectrumGrid) -> SpectrumGrid:
    if not z.centered:
        raise ValueError("spectrum is not centred")
    h, w = z.values.shape[-2:]
    return SpectrumGrid(np.roll(z.values, (-(h // 2), -(w // 2)), axis=(-2, -1)), centered=False)


# -- templates and weights ---------------------------------------------------


def ring_distance(h: int, w: int) -> tuple[np.ndarray, int]:
    """Chebyshev distance of each centred bin from the centre, and its maximum."""
    cu, cv = h // 2, w // 2
    du = np.abs(np.arange(h) - cu)[:, None]
    dv = np.abs(np.arange(w) - cv)[None, :]
    d = np.maximum(du, dv)
    return d, int(d.max())


@dataclass(frozen=True)
class TemplateBank:
    """``n_t`` binary masks over a centred grid; mask 0 is the outermost band."""

    height: int
    width: int
    masks: np.ndarray = field(repr=False)  # (n_t, H, W) of {0, 1}
    band: np.ndarray = field(repr=False)  # (H, W) zero-based template index per bin

    @property
    def n_t(self) -> int:
        return self.masks.shape[0]

    def counts(self) -> list[int]:
        return [int(m.sum()) for m in self.masks]


@functools.lru_cache(maxsize=64)
def build_templates(h: int, w: int, n_t: int) -> TemplateBank:
    if h < 2 or w < 2:
        raise ValueError(f"template grid must be at least 2x2, got {h}x{w}")
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    d, d_max = ring_distance(h, w)
    # low-to-high band level in 1..n_t, exact integer floor(d / d_max * n_t) + 1
    level = np.minimum(n_t, (d * n_t) // d_max + 1)
    band = n_t - level
    masks = (band[None, :, :] == np.arange(n_t)[:, None, None]).astype(np.float64)
    masks.setflags(write=False)
    band.setflags(write=False)
    return TemplateBank(h, w, masks, band)


@dataclass
class AdjustableFilterSpec:
    mode: str
    p: np.ndarray
    n_t: int = 20
    p_min: float = P_MIN
    p_max: float = P_MAX

    def __post_init__(self):
        if self.mode not in ("high", "low"):
            raise ValueError(f"mode must be 'high' or 'low', got {self.mode!r}")
        self.p = np.atleast_1d(np.asarray(self.p, dtype=np.float64))
        if np.any(self.p < self.p_min) or np.any(self.p > self.p_max):
            raise ValueError(f"p values must lie in [{self.p_min}, {self.p_max}], "
                             f"got range [{self.p.min()}, {self.p.max()}]")

    @property
    def sigma(self) -> float:
        return float(self.n_t)


def ep_exponents(spec: AdjustableFilterSpec) -> np.ndarray:
    """``|m - mu|^p / (p sigma^p)`` per channel and template, shape ``(N_c, n_t)``."""
    m = np.arange(1, spec.n_t + 1) - 0.5
    mu = 0.0 if spec.mode == "high" else float(spec.n_t)
    p = spec.p[:, None]
    return (np.abs(m - mu)[None, :] / spec.sigma) ** p / p


def ep_weights(spec: AdjustableFilterSpec) -> np.ndarray:
    """Template weights ``exp(-|m - mu|^p / (p sigma^p))`` with ``m = i - 0.5``."""
    return np.exp(-ep_exponents(spec))


def assemble_filter(weights: np.ndarray, bank: TemplateBank) -> np.ndarray:
    """Weighted template sum, one centred ``H x W`` mask per row of ``weights``."""
    weights = np.atleast_2d(weights)
    if weights.shape[1] != bank.n_t:
        raise ValueError(f"{weights.shape[1]} weights per channel for {bank.n_t} templates")
    return np.tensordot(weights, bank.masks, axes=([1], [0]))


def make_filter(mode: str, p, bank: TemplateBank, p_min: float = P_MIN, p_max: float = P_MAX) -> np.ndarray:
    spec = AdjustableFilterSpec(mode, p, bank.n_t, p_min, p_max)
    return assemble_filter(ep_weights(spec), bank)


# -- filtering ---------------------------------------------------------------


def spectral_filter(x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, float]:
    """Apply a centred real mask to the spectrum of every ``H x W`` plane of ``x``."""
    z = shift(fft2d(x))
    z = SpectrumGrid(z.values * mask.astype(x.dtype, copy=False), centered=True)
    return ifft2d(unshift(z))


IMAG_TOLERANCE = 1e-3


def _check_mask(x: Tensor, mask: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    _check_pow2(h, w)
    mask = np.asarray(mask, dtype=x.dtype)
    if mask.shape[-2:] != (h, w) or (mask.ndim >= 3 and mask.shape[-3] != x.shape[-3]):
        raise ValueError(f"mask shape {mask.shape} does not fit input {x.shape}")
    return mask


def _check_residual(x: Tensor, residual: float, diagnostics: dict | None) -> None:
    scale_ = float(np.abs(x.data).max()) if x.data.size else 0.0
    if residual > IMAG_TOLERANCE * scale_ + 1e-12:
        raise FloatingPointError(f"imaginary residual {residual:.3g} after inverse FFT")
    if diagnostics is not None:
        diagnostics["imag_residual"] = max(diagnostics.get("imag_residual", 0.0), residual)


def filter_apply(x: Tensor, mask: np.ndarray, diagnostics: dict | None = None) -> Tensor:
    """Differentiable frequency filtering of ``(..., N_c, H, W)`` maps.

    ``mask`` has shape ``(N_c, H, W)`` (or ``(H, W)`` for all channels). The
    map is self-adjoint, so the upstream gradient is filtered the same way.
    """
    mask = _check_mask(x, mask)
    out, residual = spectral_filter(x.data, mask)
    _check_residual(x, residual, diagnostics)

    def rule(g):
        return (spectral_filter(g, mask)[0].astype(x.dtype),)

    return record(out.astype(x.dtype), (x,), rule)


def filter_bank_apply(x: Tensor, masks: np.ndarray, diagnostics: dict | None = None) -> list[Tensor]:
    """``filter_apply`` for a stack of masks ``(K, N_c, H, W)`` sharing one forward FFT.

    The adjoint sums ``mask_k * FFT(g_k)`` over ``k`` before a single inverse.
    """
    masks = _check_mask(x, masks)
    k = masks.shape[0]
    pad = (slice(None),) + (None,) * (x.ndim - 3)
    mk = masks[pad]  # (K, 1.., N_c, H, W)
    z = shift(fft2d(x.data)).values
    out, residual = ifft2d(unshift(SpectrumGrid(z[None] * mk, centered=True)))
    _check_residual(x, residual, diagnostics)
    out = out.astype(x.dtype)

    def rule(g):
        zg = (shift(fft2d(g)).values * mk).sum(axis=0)
        return (ifft2d(unshift(SpectrumGrid(zg, centered=True)))[0].astype(x.dtype),)

    stacked = record(out, (x,), rule)
    return [_take(stacked, i) for i in range(k)]


def _take(stacked: Tensor, i: int) -> Tensor:
    def rule(g):
        full = np.zeros_like(stacked.data)
        full[i] = g
        return (full,)

    return record(stacked.data[i], (stacked,), rule)


@dataclass
class FrequencySeries:
    branch: str
    elements: list
    schedule: np.ndarray  # (N_f, N_c)

    def __len__(self) -> int:
        return len(self.elements)


def p_schedule(p1, n_f: int, p_max: float = P_MAX) -> np.ndarray:
    """Evenly spaced shape vectors from ``p1`` up to ``p_max``; shape ``(n_f, N_c)``."""
    p1 = np.atleast_1d(np.asarray(p1, dtype=np.float64))
    if n_f < 1:
        raise ValueError("n_f must be >= 1")
    if n_f == 1:
        return p1[None, :].copy()
    frac = np.arange(n_f)[:, None] / (n_f - 1)
    sched = p1[None, :] + frac * (p_max - p1[None, :])
    sched[-1] = p_max
    return sched


def fvf_series(x: Tensor, p_h1, p_l1, n_f: int, n_t: int = 20,
               p_min: float = P_MIN, p_max: float = P_MAX,
               branches: tuple[str, ...] = ("high", "low"),
               diagnostics: dict | None = None) -> tuple[FrequencySeries | None, FrequencySeries | None]:
    """High- and low-frequency time series of ``x`` as ``p`` sweeps to ``p_max``."""
    h, w = x.shape[-2:]
    bank = build_templates(h, w, n_t)
    schedules, masks = {}, []
    for mode, p1 in (("high", p_h1), ("low", p_l1)):
        if mode not in branches:
            continue
        p1 = np.atleast_1d(np.asarray(p1, dtype=np.float64))
        if np.any(p1 < p_min) or np.any(p1 > p_max):
            raise ValueError(f"initial {mode} vector outside [{p_min}, {p_max}]")
        schedules[mode] = p_schedule(p1, n_f, p_max)
        masks.extend(make_filter(mode, p, bank, p_min, p_max) for p in schedules[mode])
    elements = filter_bank_apply(x, np.stack(masks), diagnostics) if masks else []
    result = {}
    for mode, sched in schedules.items():
        result[mode] = FrequencySeries(mode, elements[:len(sched)], sched)
        elements = elements[len(sched):]
    return result.get("high"), result.get("low")


def sample_adjustable_vectors(rng, n_c: int, p_min: float = P_MIN,
                              p_max: float = P_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(p_h1, p_l1)`` uniformly from ``[p_min, p_max]``; ``rng`` may be a seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    draws = rng.uniform(p_min, p_max, size=(2, n_c))
    return draws[0], draws[1]
