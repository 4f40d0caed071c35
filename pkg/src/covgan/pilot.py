"""Omni-combined pilot reception and the concatenated multi-BS signature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PilotError(ValueError):
    pass


@dataclass(frozen=True)
class PilotConfig:
    """Uplink pilot settings. ``snr_db=None`` means noiseless reception."""

    symbols: np.ndarray | None = None  # length-K unit-modulus symbols, None = all ones
    snr_db: float | None = None
    seed: int = 0

    def pilot_symbols(self, k_subcarriers: int) -> np.ndarray:
        if self.symbols is None:
            return np.ones(k_subcarriers, dtype=np.complex128)
        s = np.asarray(self.symbols, dtype=np.complex128)
        if s.shape != (k_subcarriers,):
            raise PilotError(f"expected {k_subcarriers} pilot symbols, got {s.shape}")
        if not np.allclose(np.abs(s), 1.0, atol=1e-9):
            raise PilotError("pilot symbols must be unit modulus")
        return s


@dataclass(frozen=True)
class Signature:
    """Concatenated omni-received pilots, BS-major / subcarrier-minor."""

    y_complex: np.ndarray  # (N*K,)
    n_bs: int
    k_sub: int

    @property
    def y_real(self) -> np.ndarray:
        """Real encoding: all real parts, then all imaginary parts (length 2NK)."""
        return np.concatenate([self.y_complex.real, self.y_complex.imag])

    @classmethod
    def from_real(cls, y_real: np.ndarray, n_bs: int, k_sub: int) -> "Signature":
        nk = n_bs * k_sub
        if y_real.shape != (2 * nk,):
            raise PilotError(f"expected real vector of length {2 * nk}, got {y_real.shape}")
        return cls(y_complex=y_real[:nk] + 1j * y_real[nk:], n_bs=n_bs, k_sub=k_sub)


def omni_combiner(m_antennas: int) -> np.ndarray:
    """Single-active-antenna combiner e_1."""
    if m_antennas < 1:
        raise PilotError("need at least one antenna")
    w = np.zeros(m_antennas, dtype=np.complex128)
    w[0] = 1.0
    return w


def receive(
    h: np.ndarray,
    w: np.ndarray,
    cfg: PilotConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Post-combining received pilots y_k = w^T h_k s_k (+ noise).

    In the noisy case the complex Gaussian variance is set so that the
    per-subcarrier SNR, mean_k |w^T h_k s_k|^2 / sigma^2, equals snr_db.
    """
    if h.shape[1] != w.shape[0]:
        raise PilotError("channel/combiner dimension mismatch")
    s = cfg.pilot_symbols(h.shape[0])
    y = (h @ w) * s  # w^T h_k, transpose (not Hermitian) combining
    if cfg.snr_db is None:
        return y
    signal_power = float(np.mean(np.abs(y) ** 2))
    if signal_power == 0.0:
        raise PilotError("SNR undefined for an all-zero combined channel")
    sigma2 = signal_power / 10.0 ** (cfg.snr_db / 10.0)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    noise = rng.normal(scale=np.sqrt(sigma2 / 2.0), size=(h.shape[0], 2))
    return y + noise[:, 0] + 1j * noise[:, 1]


def concat_signature(per_bs: list[np.ndarray]) -> Signature:
    """Stack per-BS pilot vectors into the training signature order."""
    if not per_bs:
        raise PilotError("need at least one per-BS pilot vector")
    k = per_bs[0].shape[0]
    for i, y in enumerate(per_bs):
        if y.shape != (k,):
            raise PilotError(f"BS {i} pilot vector has shape {y.shape}, expected ({k},)")
    return Signature(
        y_complex=np.concatenate([np.asarray(y, dtype=np.complex128) for y in per_bs]),
        n_bs=len(per_bs),
        k_sub=k,
    )
