"""Grid sweep, signature/covariance pairing, normalization and the CCV1 file format.

A dataset is a set of (pilot signature, virtual covariance image) pairs
for user locations on a rectangular grid, one target BS per file. Records
are stored as little-endian float32 with global normalization constants in
the header, so files are byte-for-byte reproducible from (scene, grid, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import channel, pilot
from .scene import Scene, SceneError, scene_digest, trace_paths

MAGIC = b"CCV1"

_HEADER_FIELDS = (
    "m", "n_bs", "k_sub", "count", "norm_sig", "norm_cov",
    "target_bs", "scene_digest", "seed",
)


class DatasetFormatError(ValueError):
    """Base class for CCV1 parsing failures."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedDatasetError(DatasetFormatError):
    pass


class DimensionError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class GridConfig:
    """Rectangular grid of candidate user locations, bounds edges included."""

    nx: int
    ny: int
    bounds: tuple[float, float, float, float]  # (x0, y0, x1, y1)
    seed: int = 0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise SceneError("grid must have nx, ny >= 1")
        x0, y0, x1, y1 = self.bounds
        if x0 > x1 or y0 > y1:
            raise SceneError("grid bounds must be ordered")


@dataclass(frozen=True)
class DatasetHeader:
    m: int
    n_bs: int
    k_sub: int
    count: int
    norm_sig: float
    norm_cov: float
    target_bs: int
    scene_digest: str  # hex SHA-256
    seed: int

    @property
    def sig_width(self) -> int:
        return 2 * self.n_bs * self.k_sub

    def to_json(self) -> str:
        return json.dumps(
            {name: getattr(self, name) for name in _HEADER_FIELDS},
            sort_keys=True,
            separators=(",", ":"),
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class DatasetRecord:
    """One un-normalized (signature, covariance image) pair."""

    signature_real: np.ndarray  # (2*N*K,) float64
    cov_image: np.ndarray  # (M, M, 2) float64
    user_xy: tuple[float, float]
    target_bs: int


@dataclass
class Dataset:
    """In-memory dataset: float32 arrays plus the header describing them."""

    header: DatasetHeader
    signatures: np.ndarray  # (count, 2*N*K) float32
    images: np.ndarray  # (count, M, M, 2) float32

    def __len__(self) -> int:
        return self.header.count

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(
            header=replace(self.header, count=int(idx.shape[0])),
            signatures=self.signatures[idx].copy(),
            images=self.images[idx].copy(),
        )


def image_to_complex(img: np.ndarray) -> np.ndarray:
    """(M, M, 2) real/imag planes -> complex (M, M)."""
    return img[..., 0] + 1j * img[..., 1]


def complex_to_image(r: np.ndarray) -> np.ndarray:
    """Complex (M, M) -> (M, M, 2) stacked real/imag planes."""
    return np.stack([r.real, r.imag], axis=-1)


def grid_points(cfg: GridConfig) -> np.ndarray:
    """(nx*ny, 2) points, row-major (x fastest), bounds edges included.

    A degenerate axis (n = 1) collapses to its lower bound.
    """
    x0, y0, x1, y1 = cfg.bounds
    xs = np.linspace(x0, x1, cfg.nx)
    ys = np.linspace(y0, y1, cfg.ny)
    xx, yy = np.meshgrid(xs, ys)  # rows = constant y
    return np.column_stack([xx.ravel(), yy.ravel()])


def build_record(
    scene: Scene,
    user_xy: tuple[float, float],
    target_bs: int,
    array: channel.ArrayConfig,
    ofdm: channel.OfdmConfig,
    pulse: channel.PulseShape,
    pilot_cfg: pilot.PilotConfig,
    rng: np.random.Generator | None = None,
) -> DatasetRecord:
    """Full pipeline for one grid point: rays -> channels -> signature + image."""
    if not 0 <= target_bs < scene.n_bs:
        raise SceneError(f"target_bs {target_bs} out of range")
    w = pilot.omni_combiner(array.m_antennas)
    basis = channel.dft_basis(array.m_antennas)
    per_bs = []
    target_h = None
    for n in range(scene.n_bs):
        paths = trace_paths(scene, user_xy, n)
        taps = channel.delay_channel(paths, array, ofdm, pulse)
        h = channel.freq_channel(taps, ofdm)
        per_bs.append(pilot.receive(h, w, pilot_cfg, rng))
        if n == target_bs:
            target_h = h
    signature = pilot.concat_signature(per_bs)
    r_g = channel.to_virtual(channel.covariance(target_h), basis)
    return DatasetRecord(
        signature_real=signature.y_real,
        cov_image=complex_to_image(r_g),
        user_xy=(float(user_xy[0]), float(user_xy[1])),
        target_bs=target_bs,
    )


def normalize(
    signatures: np.ndarray, images: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Scale by the global max |element| of each tensor kind.

    Returns (signatures', images', norm_sig, norm_cov). One constant per
    kind across the whole set, so relative strengths between records survive.
    """
    if signatures.shape[0] == 0:
        raise DatasetFormatError("cannot normalize an empty dataset")
    norm_sig = float(np.max(np.abs(signatures)))
    norm_cov = float(np.max(np.abs(images)))
    if norm_sig == 0.0 or norm_cov == 0.0:
        raise DatasetFormatError("normalization undefined for an all-zero dataset")
    return signatures / norm_sig, images / norm_cov, norm_sig, norm_cov


# Worker-side state for parallel builds; set once per process via the initializer.
_BUILD_CTX: dict = {}


def _init_build_ctx(scene, target_bs, array, ofdm, pulse, snr_db, seed, points):
    _BUILD_CTX.update(
        scene=scene, target_bs=target_bs, array=array, ofdm=ofdm,
        pulse=pulse, snr_db=snr_db, seed=seed, points=points,
    )


def _build_point(index: int):
    c = _BUILD_CTX
    rng = np.random.default_rng([c["seed"], index])
    cfg = pilot.PilotConfig(snr_db=c["snr_db"], seed=c["seed"])
    rec = build_record(
        c["scene"], tuple(c["points"][index]), c["target_bs"],
        c["array"], c["ofdm"], c["pulse"], cfg, rng,
    )
    return index, rec.signature_real, rec.cov_image


def build_dataset(
    scene: Scene,
    grid: GridConfig,
    target_bs: int,
    array: channel.ArrayConfig,
    ofdm: channel.OfdmConfig,
    pulse: channel.PulseShape,
    snr_db: float | None = None,
    workers: int = 1,
) -> Dataset:
    """Sweep the grid and assemble a normalized dataset.

    The per-point RNG stream is derived from (grid.seed, point_index), so
    the result is byte-identical for any worker count.
    """
    x0, y0, x1, y1 = grid.bounds
    if not (scene.contains(x0, y0) and scene.contains(x1, y1)):
        raise SceneError("grid bounds outside the street footprint")
    points = grid_points(grid)
    n = points.shape[0]
    sig_width = 2 * scene.n_bs * ofdm.k_subcarriers
    signatures = np.empty((n, sig_width), dtype=np.float64)
    m = array.m_antennas
    images = np.empty((n, m, m, 2), dtype=np.float64)

    init_args = (scene, target_bs, array, ofdm, pulse, snr_db, grid.seed, points)
    if workers <= 1:
        _init_build_ctx(*init_args)
        results = map(_build_point, range(n))
        for index, sig, img in results:
            signatures[index] = sig
            images[index] = img
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_build_ctx, initargs=init_args
        ) as pool:
            for index, sig, img in pool.map(_build_point, range(n), chunksize=64):
                signatures[index] = sig
                images[index] = img

    signatures, images, norm_sig, norm_cov = normalize(signatures, images)
    header = DatasetHeader(
        m=m,
        n_bs=scene.n_bs,
        k_sub=ofdm.k_subcarriers,
        count=n,
        norm_sig=norm_sig,
        norm_cov=norm_cov,
        target_bs=target_bs,
        scene_digest=scene_digest(scene.config),
        seed=grid.seed,
    )
    return Dataset(
        header=header,
        signatures=signatures.astype("<f4"),
        images=images.astype("<f4"),
    )


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled partition into (train, test)."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetFormatError("train_fraction must be in (0, 1)")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise DatasetFormatError(f"split leaves an empty side ({n_train}/{n - n_train})")
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


def atomic_write(path: str, data: bytes) -> None:
    """Write via a temp file + rename so failures leave no partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(path: str, dataset: Dataset) -> None:
    """Serialize to the CCV1 container (see read_dataset for the layout)."""
    header = dataset.header
    if dataset.signatures.shape != (header.count, header.sig_width):
        raise DimensionError("signature array inconsistent with header")
    if dataset.images.shape != (header.count, header.m, header.m, 2):
        raise DimensionError("image array inconsistent with header")
    head = header.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    sig = np.ascontiguousarray(dataset.signatures, dtype="<f4")
    img = dataset.images.astype("<f4")
    for i in range(header.count):
        parts.append(sig[i].tobytes())
        parts.append(np.ascontiguousarray(img[i, :, :, 0]).tobytes())
        parts.append(np.ascontiguousarray(img[i, :, :, 1]).tobytes())
    atomic_write(path, b"".join(parts))


def read_dataset(path: str) -> Dataset:
    """Parse a CCV1 file.

    Layout: magic "CCV1" | u32 LE header length | UTF-8 JSON header |
    count records, each 2NK little-endian float32 (signature, real block
    then imaginary block) followed by 2M^2 float32 (image, real plane
    row-major then imaginary plane).
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise TruncatedDatasetError("file ends inside the header length field")
    (head_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + head_len:
        raise TruncatedDatasetError("file ends inside the header")
    try:
        raw = json.loads(blob[8 : 8 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unparseable header: {exc}") from exc
    missing = [k for k in _HEADER_FIELDS if k not in raw]
    if missing:
        raise DatasetFormatError(f"header missing fields {missing}")
    header = DatasetHeader(**{k: raw[k] for k in _HEADER_FIELDS})
    if header.m < 2 or header.n_bs < 1 or header.k_sub < 1 or header.count < 0:
        raise DimensionError("header dimensions out of range")
    if header.norm_sig <= 0 or header.norm_cov <= 0:
        raise DimensionError("normalization constants must be positive")

    record_floats = header.sig_width + 2 * header.m * header.m
    body = blob[8 + head_len :]
    expected = header.count * record_floats * 4
    if len(body) < expected:
        raise TruncatedDatasetError(
            f"expected {expected} record bytes, found {len(body)}"
        )
    if len(body) > expected:
        raise DimensionError(f"{len(body) - expected} trailing bytes after records")

    flat = np.frombuffer(body, dtype="<f4").reshape(header.count, record_floats)
    signatures = flat[:, : header.sig_width].copy()
    planes = flat[:, header.sig_width :].reshape(header.count, 2, header.m, header.m)
    images = np.ascontiguousarray(np.moveaxis(planes, 1, -1))
    return Dataset(header=header, signatures=signatures, images=images)
