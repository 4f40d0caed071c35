"""Wideband geometric channel, spatial covariance and the virtual (DFT) domain.

Conventions: channels are (K, M) complex arrays, row k = the channel at
subcarrier k. Delay-tap channels are (D, M), row d = the tap-d vector.
Covariance matrices are (M, M) Hermitian PSD. The virtual domain is the
conjugation of the antenna-domain covariance by the unitary DFT basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import PathSet


class ChannelError(ValueError):
    """Inconsistent channel dimensions or tolerance violations."""


@dataclass(frozen=True)
class ArrayConfig:
    m_antennas: int = 32
    spacing_wavelengths: float = 0.5

    def __post_init__(self):
        if self.m_antennas < 2:
            raise ChannelError("m_antennas must be >= 2")
        if self.spacing_wavelengths <= 0:
            raise ChannelError("spacing must be positive")


@dataclass(frozen=True)
class OfdmConfig:
    k_subcarriers: int = 64
    d_taps: int = 64
    sample_period_s: float = 2e-9  # 500 MHz bandwidth

    def __post_init__(self):
        if self.k_subcarriers < 1 or self.d_taps < 1:
            raise ChannelError("k_subcarriers and d_taps must be >= 1")
        if self.d_taps > self.k_subcarriers:
            raise ChannelError("d_taps must not exceed k_subcarriers")
        if self.sample_period_s <= 0:
            raise ChannelError("sample_period_s must be positive")


@dataclass(frozen=True)
class PulseShape:
    """Raised-cosine pulse, p(0) = 1, truncated to span_taps on each side."""

    kind: str = "raised-cosine"
    rolloff: float = 0.8
    span_taps: int = 8

    def __post_init__(self):
        if self.kind != "raised-cosine":
            raise ChannelError(f"unsupported pulse kind {self.kind!r}")
        if not 0.0 <= self.rolloff <= 1.0:
            raise ChannelError("rolloff must be in [0, 1]")
        if self.span_taps < 1:
            raise ChannelError("span_taps must be >= 1")

    def sample(self, t_over_ts):
        """Evaluate p(t) at t/T_s (vectorized); zero outside the span."""
        x = np.asarray(t_over_ts, dtype=float)
        beta = self.rolloff
        with np.errstate(divide="ignore", invalid="ignore"):
            denom = 1.0 - (2.0 * beta * x) ** 2
            out = np.sinc(x) * np.cos(np.pi * beta * x) / denom
        if beta > 0:
            # 0/0 point of the closed form at |t| = T_s / (2 beta)
            singular = np.isclose(np.abs(denom), 0.0, atol=1e-12)
            out = np.where(singular, (np.pi / 4.0) * np.sinc(1.0 / (2.0 * beta)), out)
        out = np.where(np.abs(x) > self.span_taps, 0.0, out)
        return out if out.ndim else float(out)


def array_response(theta: float, cfg: ArrayConfig) -> np.ndarray:
    """ULA response, element m = exp(j 2 pi m spacing sin(theta)). ||a||^2 = M."""
    if not abs(theta) < np.pi / 2:
        raise ChannelError("AoA must satisfy |theta| < pi/2")
    m = np.arange(cfg.m_antennas)
    return np.exp(2j * np.pi * m * cfg.spacing_wavelengths * math.sin(theta))


def delay_channel(
    paths: PathSet, array: ArrayConfig, ofdm: OfdmConfig, pulse: PulseShape
) -> np.ndarray:
    """Delay-tap channel (D, M): sqrt(M) * sum_l gain_l p(d T_s - tau_l) a(theta_l).

    Path delays are referenced to the earliest path before tap placement.
    Raises when pulse energy spilling past tap D-1 exceeds 1e-6 of the
    total placed energy (the tap window is too short for the delay spread).
    """
    d_taps, ts = ofdm.d_taps, ofdm.sample_period_s
    taps = np.zeros((d_taps, array.m_antennas), dtype=np.complex128)
    if not paths.paths:
        return taps

    t0 = min(p.delay_s for p in paths.paths)
    kept_energy = 0.0
    lost_energy = 0.0
    for p in paths.paths:
        center = (p.delay_s - t0) / ts
        d_lo = max(0, math.ceil(center - pulse.span_taps))
        d_hi = math.floor(center + pulse.span_taps)
        d_all = np.arange(d_lo, d_hi + 1)
        samples = pulse.sample(d_all - center)
        power = abs(p.gain) ** 2
        inside = d_all < d_taps
        kept_energy += power * float(np.sum(samples[inside] ** 2))
        lost_energy += power * float(np.sum(samples[~inside] ** 2))
        d_in = d_all[inside]
        taps[d_in] += (
            math.sqrt(array.m_antennas)
            * p.gain
            * samples[inside][:, None]
            * array_response(p.aoa_rad, array)[None, :]
        )

    total = kept_energy + lost_energy
    if total > 0 and lost_energy > 1e-6 * total:
        raise ChannelError(
            f"delay overflow: {lost_energy / total:.2e} of path energy beyond {d_taps} taps"
        )
    return taps


def freq_channel(taps: np.ndarray, ofdm: OfdmConfig) -> np.ndarray:
    """Frequency channel (K, M): h_k = sum_d taps_d exp(-j 2 pi k d / K)."""
    d, _ = taps.shape
    if d > ofdm.k_subcarriers:
        raise ChannelError("tap count exceeds subcarrier count")
    return np.fft.fft(taps, n=ofdm.k_subcarriers, axis=0)


def covariance(h: np.ndarray) -> np.ndarray:
    """Spatial covariance (1/K) sum_k h_k h_k^H, Hermitian by construction."""
    k = h.shape[0]
    if k < 1:
        raise ChannelError("need at least one subcarrier")
    r = h.T @ h.conj() / k
    return (r + r.conj().T) / 2.0


def dft_basis(m: int) -> np.ndarray:
    """Unitary DFT basis, column m = (1/sqrt(M)) [1, e^{-j2pi m/M}, ...]."""
    if m < 2:
        raise ChannelError("basis size must be >= 2")
    p = np.arange(m)
    return np.exp(-2j * np.pi * np.outer(p, p) / m) / np.sqrt(m)


def grid_aoa(m: int, n_antennas: int, spacing_wavelengths: float = 0.5) -> float:
    """AoA whose array response equals sqrt(M) times DFT column m.

    Satisfies spacing * sin(theta) = -m/M (mod 1), mapped into (-1, 1).
    """
    s = (-m / n_antennas) % 1.0
    s = s - 1.0 if s > 0.5 else s
    s /= spacing_wavelengths
    if not -1.0 < s < 1.0:
        raise ChannelError(f"grid index {m} has no propagating angle")
    return math.asin(s)


def hermitian_part(r: np.ndarray) -> np.ndarray:
    """(r + r^H) / 2 over the trailing two axes."""
    return (r + np.conj(np.swapaxes(r, -1, -2))) / 2.0


def hermitian_residual(r: np.ndarray) -> float:
    """Relative Frobenius distance from r to its Hermitian part (0 for zero input)."""
    norm = np.linalg.norm(r)
    if norm == 0:
        return 0.0
    return float(np.linalg.norm(r - r.conj().T) / norm)


def min_eig_ratio(r: np.ndarray) -> float:
    """Smallest eigenvalue over trace; >= -tol means PSD within tolerance."""
    tr = float(np.real(np.trace(r)))
    if tr == 0:
        return 0.0
    return float(np.min(np.linalg.eigvalsh((r + r.conj().T) / 2.0)) / tr)


def virtual_channel(h_vec: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Beamspace coordinates g = U^H h; unitary, so U g reconstructs h."""
    if h_vec.shape[0] != basis.shape[0]:
        raise ChannelError("vector/basis dimension mismatch")
    return basis.conj().T @ h_vec


def to_virtual(r: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Virtual-domain covariance U^H R U."""
    _check_conjugation_input(r, basis)
    out = basis.conj().T @ r @ basis
    return (out + out.conj().T) / 2.0


def from_virtual(r_g: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Antenna-domain covariance U R_g U^H (inverse of :func:`to_virtual`)."""
    _check_conjugation_input(r_g, basis)
    out = basis @ r_g @ basis.conj().T
    return (out + out.conj().T) / 2.0


def _check_conjugation_input(r: np.ndarray, basis: np.ndarray) -> None:
    if r.shape != basis.shape:
        raise ChannelError("matrix/basis dimension mismatch")
    if hermitian_residual(r) > 1e-10:
        raise ChannelError("input matrix is not Hermitian within tolerance")
