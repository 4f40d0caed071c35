"""NMSE metric, non-learned baselines, dataset-size sweeps and image export.

NMSE is computed between de-normalized virtual covariance matrices after
Hermitian symmetrization. The metric is invariant to simultaneous unitary
conjugation of both arguments, so virtual-domain and antenna-domain NMSE
coincide.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import hermitian_part
from .dataset import Dataset, atomic_write, split


class EvalError(ValueError):
    pass


def nmse(r_hat: np.ndarray, r: np.ndarray) -> float:
    """||r_hat - r||_F^2 / ||r||_F^2; zero iff the matrices are equal."""
    if r_hat.shape != r.shape:
        raise EvalError(f"shape mismatch {r_hat.shape} vs {r.shape}")
    denom = float(np.sum(np.abs(r) ** 2))
    if denom == 0.0:
        raise EvalError("NMSE undefined for a zero-norm reference")
    return float(np.sum(np.abs(r_hat - r) ** 2) / denom)


def nmse_batch(r_hat: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Per-sample NMSE over the leading axis of (B, M, M) arrays."""
    if r_hat.shape != r.shape:
        raise EvalError(f"shape mismatch {r_hat.shape} vs {r.shape}")
    denom = np.sum(np.abs(r) ** 2, axis=(-2, -1))
    if np.any(denom == 0.0):
        raise EvalError("NMSE undefined for a zero-norm reference")
    return np.sum(np.abs(r_hat - r) ** 2, axis=(-2, -1)) / denom


def true_covariances(ds: Dataset) -> np.ndarray:
    """De-normalized Hermitian-symmetrized ground truth (count, M, M)."""
    r = (ds.images[..., 0] + 1j * ds.images[..., 1]).astype(np.complex128)
    return hermitian_part(r * ds.header.norm_cov)


def baseline_mean(train_set: Dataset):
    """Constant predictor returning the mean training covariance image.

    Ignores the signature; the reference point learned models must beat.
    """
    if len(train_set) == 0:
        raise EvalError("cannot fit the mean baseline on an empty set")
    mean_img = train_set.images.astype(np.float64).mean(axis=0) * train_set.header.norm_cov
    mean_cov = hermitian_part(mean_img[..., 0] + 1j * mean_img[..., 1])

    def predictor(signature: np.ndarray | None = None) -> np.ndarray:
        return mean_cov.copy()

    return predictor


def baseline_knn(train_set: Dataset, y_query: np.ndarray, k: int) -> np.ndarray:
    """Average covariance of the k nearest training signatures (Euclidean).

    Distance ties are broken by record index. Returns a de-normalized
    Hermitian (M, M) matrix.
    """
    if len(train_set) == 0:
        raise EvalError("cannot run kNN on an empty set")
    if k < 1:
        raise EvalError("k must be >= 1")
    d2 = np.sum((train_set.signatures.astype(np.float64) - y_query.astype(np.float64)) ** 2, axis=1)
    order = np.argsort(d2, kind="stable")[: min(k, len(train_set))]
    img = train_set.images[order].astype(np.float64).mean(axis=0) * train_set.header.norm_cov
    return hermitian_part(img[..., 0] + 1j * img[..., 1])


def model_nmse(model, test_set: Dataset, z_policy: str = "fixed-zero") -> np.ndarray:
    """Per-sample NMSE of a trained GAN on a dataset."""
    from .gan import predict

    pred = predict(model, test_set.signatures, z_policy=z_policy)
    return nmse_batch(pred, true_covariances(test_set))


def baseline_mean_nmse(train_set: Dataset, test_set: Dataset) -> float:
    predictor = baseline_mean(train_set)
    truth = true_covariances(test_set)
    constant = predictor()
    return float(np.mean(nmse_batch(np.broadcast_to(constant, truth.shape), truth)))


@dataclass
class EvalReport:
    """Evaluation results; serialized as JSON."""

    mean_nmse: float | None = None
    median_nmse: float | None = None
    per_sample_nmse: list[float] = field(default_factory=list)
    baseline_nmse: dict = field(default_factory=dict)
    sizes: list[int] = field(default_factory=list)
    nmse_per_size: dict = field(default_factory=dict)  # size -> per-seed list
    median_per_size: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    runtime_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path: str) -> None:
        atomic_write(path, self.to_json().encode("utf-8"))


def curve_nmse_vs_size(
    dataset: Dataset,
    sizes: list[int],
    train_cfg,
    seeds: list[int],
    train_fraction: float = 0.8,
    z_policy: str = "fixed-zero",
) -> EvalReport:
    """Fig.-4-style sweep: test NMSE versus training-subset size.

    For each seed the dataset is split train/test, the train side is
    subsampled to each requested size, a fresh model is trained, and the
    mean test NMSE is recorded. Medians across seeds are reported per size.
    """
    from dataclasses import replace

    from .gan import train

    t0 = time.perf_counter()
    report = EvalReport(sizes=list(sizes), seeds=list(seeds))
    results: dict[int, list[float]] = {int(s): [] for s in sizes}
    baselines = []
    for seed in seeds:
        train_split, test_split = split(dataset, train_fraction, seed)
        if max(sizes) > len(train_split):
            raise EvalError(
                f"requested size {max(sizes)} exceeds the {len(train_split)}-record train split"
            )
        baselines.append(baseline_mean_nmse(train_split, test_split))
        for size in sizes:
            rng = np.random.default_rng([seed, size])
            pick = rng.permutation(len(train_split))[: int(size)]
            subset = train_split.subset(pick)
            model, _ = train(subset, None, replace(train_cfg, seed=seed))
            results[int(size)].append(float(np.mean(model_nmse(model, test_split, z_policy))))
    report.nmse_per_size = {str(s): results[int(s)] for s in sizes}
    report.median_per_size = {str(s): float(np.median(results[int(s)])) for s in sizes}
    report.baseline_nmse = {"mean_predictor": float(np.median(baselines))}
    largest = str(max(sizes))
    report.mean_nmse = float(np.mean(results[int(max(sizes))]))
    report.median_nmse = report.median_per_size[largest]
    report.runtime_s = time.perf_counter() - t0
    return report


def export_cov_image(r: np.ndarray, plane: str, path: str) -> None:
    """Write one plane of a covariance matrix as an 8-bit P5 graymap.

    Pixels are min-max scaled per image; a constant matrix maps to
    mid-gray 128.
    """
    if plane not in ("real", "imag"):
        raise EvalError(f"plane must be 'real' or 'imag', got {plane!r}")
    v = r.real if plane == "real" else r.imag
    if not np.all(np.isfinite(v)):
        raise EvalError("matrix contains non-finite entries")
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        pix = np.round(255.0 * (v - lo) / (hi - lo)).astype(np.uint8)
    else:
        pix = np.full(v.shape, 128, dtype=np.uint8)
    head = f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii")
    atomic_write(path, head + pix.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Parse a binary P5 graymap back into a uint8 array (test helper)."""
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise EvalError("not a P5 graymap")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
