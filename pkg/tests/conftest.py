import numpy as np
import pytest

from covgan import channel, dataset, scene


def random_hermitian_psd(m: int, rank: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=(m, rank)) + 1j * rng.normal(size=(m, rank))
    r = a @ a.conj().T
    return (r + r.conj().T) / 2.0


def random_freq_channel(m: int, k: int, n_paths: int, rng: np.random.Generator) -> np.ndarray:
    """Random few-path frequency channel, direct evaluation (test-side oracle)."""
    h = np.zeros((k, m), dtype=np.complex128)
    for _ in range(n_paths):
        theta = rng.uniform(-np.pi / 2 * 0.95, np.pi / 2 * 0.95)
        gain = rng.normal() + 1j * rng.normal()
        delay = rng.integers(0, 4)
        a = np.exp(2j * np.pi * 0.5 * np.arange(m) * np.sin(theta))
        phase = np.exp(-2j * np.pi * np.arange(k) * delay / k)
        h += gain * phase[:, None] * a[None, :]
    return h


@pytest.fixture(scope="session")
def default_scene() -> scene.Scene:
    return scene.build_scene(scene.SceneConfig())


# Coarse numerology for fast tests: 16 taps at 16 ns cover the street's
# full delay spread (including the raised-cosine span) without truncation.
FAST_OFDM = channel.OfdmConfig(k_subcarriers=16, d_taps=16, sample_period_s=16e-9)


@pytest.fixture(scope="session")
def small_dataset() -> dataset.Dataset:
    """4x4 grid, M=8, K=16: a fast dataset reused by serialization/GAN tests."""
    sc = scene.build_scene(scene.SceneConfig())
    grid = dataset.GridConfig(nx=4, ny=4, bounds=(2.0, 2.0, 28.0, 18.0), seed=7)
    return dataset.build_dataset(
        sc, grid, 0, channel.ArrayConfig(m_antennas=8), FAST_OFDM, channel.PulseShape(),
    )
