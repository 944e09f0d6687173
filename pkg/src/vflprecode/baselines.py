"""Perfect-CSI reference precoders. Channels are the columns of H (N x K)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .airlink import sum_rate


class ZFInfeasibleError(np.linalg.LinAlgError):
    pass


class BisectionError(RuntimeError):
    pass


@dataclass
class BaselineResult:
    V: np.ndarray
    trace: list = field(default_factory=list)
    iterations: int = 0
    flags: tuple = ()


def _scale_to(V, power):
    t = np.sum(np.abs(V) ** 2)
    return V if t == 0 else V * np.sqrt(power / t)


def zf_precoder(H, power: float, rcond: float = 1e-10) -> np.ndarray:
    H = np.asarray(H, dtype=complex)
    N, K = H.shape
    if K > N:
        raise ZFInfeasibleError(f"ZF infeasible: K={K} users exceed N={N} antennas")
    s = np.linalg.svd(H, compute_uv=False)
    if s[-1] <= rcond * s[0]:
        raise ZFInfeasibleError("ZF infeasible: channel matrix is rank deficient")
    V0 = H @ np.linalg.inv(H.conj().T @ H)
    return _scale_to(V0, power)


def mrt_precoder(H, power: float) -> BaselineResult:
    """Matched filter with equal power per user; zero channels get zero columns."""
    H = np.asarray(H, dtype=complex)
    K = H.shape[1]
    norms = np.linalg.norm(H, axis=0)
    zero = norms == 0
    V = H / np.where(zero, 1.0, norms) * np.sqrt(power / K)
    V[:, zero] = 0
    flags = tuple(int(k) for k in np.flatnonzero(zero))
    return BaselineResult(V, flags=flags)


def random_precoder(N: int, K: int, power: float, rng) -> np.ndarray:
    V = rng.standard_normal((N, K)) + 1j * rng.standard_normal((N, K))
    return _scale_to(V, power)


def _solve_power(A, B, power, mu_tol=1e-12, max_grow=200):
    """Find mu >= 0 with ||(A + mu I)^{-1} B||_F^2 = power (or mu = 0 if already below).

    A is Hermitian PSD; its eigendecomposition makes every trial solve O(N K).
    """
    lam, U = np.linalg.eigh(A)
    lam = np.maximum(lam, 0.0)
    C = np.abs(U.conj().T @ B) ** 2
    c = C.sum(axis=1)
    scale = max(lam.max(), 1.0)
    tiny = 1e-12 * scale

    def pw(mu):
        d = lam + mu
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(c > 0, c / d**2, 0.0)
        return terms.sum()

    null = lam <= tiny
    if not np.any(null & (c > 1e-20 * c.sum())):
        # mu = 0 has a finite solution on the range of A
        p0 = np.sum(c[~null] / lam[~null] ** 2) if np.any(~null) else 0.0
        if p0 <= power:
            d = np.where(null, np.inf, lam)
            return U @ ((U.conj().T @ B) / d[:, None]), 0.0
    lo, hi = 0.0, scale * 1e-6 + 1e-12
    for _ in range(max_grow):
        if pw(hi) < power:
            break
        lo, hi = hi, hi * 2.0
    else:
        raise BisectionError(f"could not bracket mu: power(mu={hi:.3e}) = {pw(hi):.3e} > P = {power}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pw(mid) > power:
            lo = mid
        else:
            hi = mid
        if hi - lo <= mu_tol * max(hi, 1e-300):
            break
    mu = hi
    return U @ ((U.conj().T @ B) / (lam + mu)[:, None]), mu


def wmmse_precoder(H, power: float, sigma2: float, max_iter: int = 200, tol: float = 1e-5) -> BaselineResult:
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    H = np.asarray(H, dtype=complex)
    N, K = H.shape
    # start from the better of MRT and (when feasible) ZF, so the result never trails either
    V = mrt_precoder(H, power).V
    if K <= N:
        try:
            V_zf = zf_precoder(H, power)
            if sum_rate(H, V_zf, sigma2) > sum_rate(H, V, sigma2):
                V = V_zf
        except ZFInfeasibleError:
            pass
    trace = [float(sum_rate(H, V, sigma2))]
    it = 0
    for it in range(1, max_iter + 1):
        A_ = H.conj().T @ V  # [k, j] = h_k^H v_j
        rx = np.sum(np.abs(A_) ** 2, axis=1) + sigma2
        d = np.diagonal(A_)
        u = d / rx
        w = 1.0 / np.maximum(1.0 - np.real(np.conj(u) * d), 1e-300)
        A = (H * (w * np.abs(u) ** 2)) @ H.conj().T
        B = H * (u * w)
        V, _ = _solve_power(A, B, power)
        trace.append(float(sum_rate(H, V, sigma2)))
        prev = trace[-2]
        if abs(trace[-1] - prev) <= tol * max(abs(prev), 1e-12):
            break
    return BaselineResult(V, trace, it)
