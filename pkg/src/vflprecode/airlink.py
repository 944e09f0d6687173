"""Downlink pilots, limited feedback, the power budget and achievable rates.

Complex gradients follow the convention ``g = df/dRe + 1j * df/dIm`` for a real
function ``f``, so that ``df = Re(conj(g) * dz)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

NORM_SIDE_BITS = 32


def noise_power(snr_db: float, power: float = 1.0) -> float:
    """sigma^2 such that 10 log10(P / sigma^2) = snr_db."""
    return power / 10.0 ** (snr_db / 10.0)


def make_pilots(n: int, l_p: int, power: float, seed: int) -> np.ndarray:
    if n < 1 or l_p < 1:
        raise ValueError("N and L_P must be >= 1")
    if power <= 0:
        raise ValueError("pilot power must be positive")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, l_p)) + 1j * rng.standard_normal((n, l_p))
    return X * np.sqrt(power) / np.linalg.norm(X, axis=0, keepdims=True)


def downlink_train(h, X, sigma2: float, rng) -> np.ndarray:
    """Received pilots ``h^H X + z`` with z ~ CN(0, sigma2 I)."""
    h = np.asarray(h)
    y = h.conj() @ X
    if sigma2 > 0:
        shape = y.shape
        y = y + np.sqrt(sigma2 / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return y


def complex_to_real(y) -> np.ndarray:
    y = np.asarray(y)
    return np.concatenate([y.real, y.imag], axis=-1)


def eta(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] % 2:
        raise ValueError("eta needs an even-length real vector")
    n = x.shape[-1] // 2
    return x[..., :n] + 1j * x[..., n:]


def eta_inv(v) -> np.ndarray:
    return complex_to_real(v)


# ---------------------------------------------------------------------------
# limited feedback


@dataclass(frozen=True)
class QuantizerConfig:
    bits: int = 2
    clip: float = 1.0
    training_bypass: bool = False

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        if self.bits > 8:
            raise ValueError("at most 8 bits per component are supported")

    @property
    def step(self) -> float:
        return 2 * self.clip / 2**self.bits


@dataclass(frozen=True)
class Feedback:
    n: int
    bits: int
    norm: float
    codes: bytes = b""
    raw: Optional[np.ndarray] = None

    @property
    def n_bits(self) -> int:
        """Total feedback bits Q = 2 N B + side norm."""
        return 2 * self.n * self.bits + NORM_SIDE_BITS


def _levels(idx, cfg: QuantizerConfig):
    return -cfg.clip + (idx + 0.5) * cfg.step


def quantize(v, cfg: QuantizerConfig) -> Feedback:
    v = np.asarray(v, dtype=complex)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    n = v.shape[-1]
    if cfg.training_bypass:
        return Feedback(n, cfg.bits, float(np.linalg.norm(v)), raw=v.copy())
    norm = float(np.linalg.norm(v))
    x = complex_to_real(v / norm) if norm > 0 else np.zeros(2 * n)
    idx = np.floor((np.clip(x, -cfg.clip, cfg.clip) + cfg.clip) / cfg.step).astype(np.int64)
    idx = np.clip(idx, 0, 2**cfg.bits - 1)
    # B bits per component, most significant first
    bitplanes = ((idx[:, None] >> np.arange(cfg.bits - 1, -1, -1)) & 1).astype(np.uint8)
    return Feedback(n, cfg.bits, norm, np.packbits(bitplanes.reshape(-1)).tobytes())


def dequantize(fb: Feedback, cfg: Optional[QuantizerConfig] = None) -> np.ndarray:
    if fb.raw is not None:
        return fb.raw.copy()
    cfg = cfg or QuantizerConfig(bits=fb.bits)
    flat = np.unpackbits(np.frombuffer(fb.codes, dtype=np.uint8))[: 2 * fb.n * fb.bits]
    planes = flat.reshape(2 * fb.n, fb.bits).astype(np.int64)
    idx = planes @ (1 << np.arange(fb.bits - 1, -1, -1))
    return fb.norm * eta(_levels(idx, cfg))


def quantize_roundtrip(v, cfg: QuantizerConfig) -> np.ndarray:
    return dequantize(quantize(v, cfg), cfg)


# ---------------------------------------------------------------------------
# power budget


def _trace(V):
    return np.sum(np.abs(V) ** 2, axis=(-2, -1))


def enforce_power(V, power: float) -> np.ndarray:
    """Scale V (..., N, K) down onto Tr(V V^H) <= power; leaves feasible V alone."""
    if power <= 0:
        raise ValueError("power must be positive")
    V = np.asarray(V, dtype=complex)
    T = _trace(V)
    scale = np.where(T > power, np.sqrt(power / np.where(T > 0, T, 1.0)), 1.0)
    return V * scale[..., None, None]


def enforce_power_vjp(V, power: float, grad_out) -> np.ndarray:
    """Pull a gradient w.r.t. enforce_power(V) back to V."""
    V = np.asarray(V, dtype=complex)
    T = _trace(V)
    active = T > power
    Ts = np.where(active, T, 1.0)
    s = np.where(active, np.sqrt(power / Ts), 1.0)
    c = np.real(np.sum(np.conj(grad_out) * V, axis=(-2, -1)))
    corr = np.where(active, c * np.sqrt(power) * Ts**-1.5, 0.0)
    return s[..., None, None] * grad_out - corr[..., None, None] * V


# ---------------------------------------------------------------------------
# rates


def _gram(H, V):
    # A[..., k, i] = h_k^H v_i
    return np.einsum("...nk,...ni->...ki", np.conj(H), V)


def rates(H, V, sigma2: float) -> np.ndarray:
    """Per-user achievable rates (..., K); channels and precoders are columns."""
    A = _gram(np.asarray(H), np.asarray(V))
    p = np.abs(A) ** 2
    sig = np.diagonal(p, axis1=-2, axis2=-1)
    interf = p.sum(axis=-1) - sig + sigma2
    return np.log2(1.0 + sig / interf)


def user_rate(h_k, V, k: int, sigma2: float) -> float:
    g = np.conj(np.asarray(h_k)) @ np.asarray(V)
    p = np.abs(g) ** 2
    return float(np.log2(1.0 + p[k] / (p.sum() - p[k] + sigma2)))


def sum_rate(H, V, sigma2: float):
    return rates(H, V, sigma2).sum(axis=-1)


def rates_vjp(H, V, sigma2: float, grad_rates) -> np.ndarray:
    """Gradient w.r.t. V of sum_k grad_rates[k] * R_k."""
    H = np.asarray(H)
    A = _gram(H, np.asarray(V))
    p = np.abs(A) ** 2
    K = A.shape[-1]
    sig = np.diagonal(p, axis1=-2, axis2=-1)
    tot = p.sum(axis=-1) + sigma2
    interf = tot - sig
    off = 1.0 - np.eye(K)
    gA = 2 * A * (1.0 / tot[..., None] - off / interf[..., None])
    gA = gA * (np.asarray(grad_rates)[..., None] / np.log(2.0))
    return np.einsum("...nk,...ki->...ni", H, gA)
