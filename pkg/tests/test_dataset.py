import numpy as np
import pytest

from conftest import FAST_OFDM
from covgan import channel, pilot
from covgan.dataset import (
    BadMagicError,
    Dataset,
    DatasetFormatError,
    DimensionError,
    GridConfig,
    TruncatedDatasetError,
    build_dataset,
    build_record,
    grid_points,
    image_to_complex,
    normalize,
    read_dataset,
    split,
    write_dataset,
)
from covgan.scene import SceneConfig, SceneError, build_scene, trace_paths


class TestGridPoints:
    def test_two_by_two_row_major(self):
        pts = grid_points(GridConfig(nx=2, ny=2, bounds=(0, 0, 1, 1)))
        assert np.array_equal(pts, [[0, 0], [1, 0], [0, 1], [1, 1]])

    def test_paper_grid_count(self):
        pts = grid_points(GridConfig(nx=200, ny=300, bounds=(0, 0, 30, 20)))
        assert pts.shape == (60_000, 2)

    def test_degenerate_grid_collapses_to_lower_corner(self):
        pts = grid_points(GridConfig(nx=1, ny=1, bounds=(3, 4, 9, 9)))
        assert np.array_equal(pts, [[3, 4]])

    def test_edges_included(self):
        pts = grid_points(GridConfig(nx=3, ny=2, bounds=(0, 0, 30, 20)))
        assert pts[:, 0].max() == 30 and pts[:, 1].max() == 20

    def test_invalid_grid_rejected(self):
        with pytest.raises(SceneError):
            GridConfig(nx=0, ny=2, bounds=(0, 0, 1, 1))
        with pytest.raises(SceneError):
            GridConfig(nx=2, ny=2, bounds=(1, 0, 0, 1))


class TestBuildRecord:
    array = channel.ArrayConfig(m_antennas=8)
    pulse = channel.PulseShape()

    def test_pipeline_recomputation_oracle(self, default_scene):
        point = (10.0, 6.0)
        rec = build_record(
            default_scene, point, 1, self.array, FAST_OFDM, self.pulse, pilot.PilotConfig()
        )

        # recompute the composition step by step
        w = pilot.omni_combiner(8)
        per_bs = []
        for n in range(4):
            paths = trace_paths(default_scene, point, n)
            taps = channel.delay_channel(paths, self.array, FAST_OFDM, self.pulse)
            h = channel.freq_channel(taps, FAST_OFDM)
            per_bs.append(h @ w)
            if n == 1:
                r_g = channel.to_virtual(channel.covariance(h), channel.dft_basis(8))
        expected_sig = np.concatenate(
            [np.concatenate(per_bs).real, np.concatenate(per_bs).imag]
        )
        assert np.array_equal(rec.signature_real, expected_sig)
        assert np.array_equal(image_to_complex(rec.cov_image), r_g)

    def test_dimensions_default_numerology(self, default_scene):
        rec = build_record(
            default_scene, (15.0, 10.0), 0,
            channel.ArrayConfig(m_antennas=32), channel.OfdmConfig(), self.pulse,
            pilot.PilotConfig(),
        )
        assert rec.signature_real.shape == (2 * 4 * 64,)  # 512
        assert rec.cov_image.shape == (32, 32, 2)

    def test_los_only_rank_one_real_diagonal(self):
        scene = build_scene(SceneConfig(bs_positions=((0.0, 0.0, 6.0),), max_bounces=0))
        rec = build_record(
            scene, (9.0, 7.0), 0, self.array, FAST_OFDM, self.pulse, pilot.PilotConfig()
        )
        r = image_to_complex(rec.cov_image)
        assert np.linalg.matrix_rank(r, tol=1e-12 * np.abs(r).max()) == 1
        assert np.allclose(np.diag(r).imag, 0.0)  # Hermitian diagonal is real

    def test_target_bs_out_of_range(self, default_scene):
        with pytest.raises(SceneError):
            build_record(
                default_scene, (5.0, 5.0), 9, self.array, FAST_OFDM, self.pulse,
                pilot.PilotConfig(),
            )


class TestNormalize:
    def test_single_record_divided_by_max(self):
        sig = np.array([[0.5, -1.0]])
        img = np.full((1, 2, 2, 2), 4.0)
        sig2, img2, n_sig, n_cov = normalize(sig, img)
        assert n_sig == 1.0 and n_cov == 4.0
        assert np.all(img2 == 1.0)

    def test_idempotent_on_normalized_data(self):
        rng = np.random.default_rng(0)
        sig = rng.normal(size=(10, 6))
        img = rng.normal(size=(10, 4, 4, 2))
        sig1, img1, *_ = normalize(sig, img)
        sig2, img2, n_sig, n_cov = normalize(sig1, img1)
        assert n_sig == 1.0 and n_cov == 1.0
        assert np.array_equal(sig1, sig2) and np.array_equal(img1, img2)

    def test_max_after_normalization_is_exactly_one(self):
        rng = np.random.default_rng(1)
        sig = rng.normal(size=(100, 8)) * 37.0
        img = rng.normal(size=(100, 4, 4, 2)) * 0.002
        sig2, img2, *_ = normalize(sig, img)
        assert np.max(np.abs(sig2)) == 1.0
        assert np.max(np.abs(img2)) == 1.0

    def test_all_zero_rejected(self):
        with pytest.raises(DatasetFormatError):
            normalize(np.zeros((3, 4)), np.zeros((3, 2, 2, 2)))


class TestSplit:
    def test_eighty_twenty(self, small_dataset):
        train, test = split(small_dataset, 0.8, seed=0)
        assert len(train) == 13 and len(test) == 3  # round(0.8 * 16)

    def test_same_seed_same_split(self, small_dataset):
        a1, b1 = split(small_dataset, 0.5, seed=42)
        a2, b2 = split(small_dataset, 0.5, seed=42)
        assert np.array_equal(a1.signatures, a2.signatures)
        assert np.array_equal(b1.images, b2.images)

    def test_union_equals_original_multiset(self, small_dataset):
        train, test = split(small_dataset, 0.7, seed=3)
        merged = np.vstack([train.signatures, test.signatures])
        original = np.sort(small_dataset.signatures, axis=0)
        assert np.array_equal(np.sort(merged, axis=0), original)

    def test_bad_fraction_rejected(self, small_dataset):
        for frac in (0.0, 1.0, -0.2):
            with pytest.raises(DatasetFormatError):
                split(small_dataset, frac, seed=0)


class TestDiskFormat:
    def test_round_trip_bit_exact(self, small_dataset, tmp_path):
        path = str(tmp_path / "ds.ccv")
        write_dataset(path, small_dataset)
        back = read_dataset(path)
        assert back.header == small_dataset.header
        assert np.array_equal(back.signatures, small_dataset.signatures)
        assert np.array_equal(back.images, small_dataset.images)
        assert back.signatures.dtype == np.dtype("<f4")

    def test_write_read_write_identical_bytes(self, small_dataset, tmp_path):
        p1, p2 = str(tmp_path / "a.ccv"), str(tmp_path / "b.ccv")
        write_dataset(p1, small_dataset)
        write_dataset(p2, read_dataset(p1))
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic(self, small_dataset, tmp_path):
        path = str(tmp_path / "ds.ccv")
        write_dataset(path, small_dataset)
        blob = bytearray(open(path, "rb").read())
        blob[:4] = b"NOPE"
        open(path, "wb").write(bytes(blob))
        with pytest.raises(BadMagicError):
            read_dataset(path)

    def test_truncated_records(self, small_dataset, tmp_path):
        path = str(tmp_path / "ds.ccv")
        write_dataset(path, small_dataset)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-10])
        with pytest.raises(TruncatedDatasetError):
            read_dataset(path)

    def test_trailing_bytes_rejected(self, small_dataset, tmp_path):
        path = str(tmp_path / "ds.ccv")
        write_dataset(path, small_dataset)
        with open(path, "ab") as f:
            f.write(b"\x00" * 8)
        with pytest.raises(DimensionError):
            read_dataset(path)

    def test_header_count_mismatch_is_truncation(self, small_dataset, tmp_path):
        import json
        import struct

        path = str(tmp_path / "ds.ccv")
        write_dataset(path, small_dataset)
        blob = open(path, "rb").read()
        (head_len,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8 : 8 + head_len])
        header["count"] += 1  # claim one more record than stored
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        open(path, "wb").write(b"CCV1" + struct.pack("<I", len(head)) + head + blob[8 + head_len :])
        with pytest.raises(TruncatedDatasetError):
            read_dataset(path)


class TestBuildDataset:
    def test_normalization_attained(self, small_dataset):
        assert np.max(np.abs(small_dataset.signatures)) == 1.0
        assert np.max(np.abs(small_dataset.images)) == 1.0

    def test_denormalized_images_hermitian_psd(self, small_dataset):
        imgs = small_dataset.images.astype(np.float64) * small_dataset.header.norm_cov
        r = imgs[..., 0] + 1j * imgs[..., 1]
        for i in range(len(small_dataset)):
            assert channel.hermitian_residual(r[i]) < 1e-6
            assert channel.min_eig_ratio(r[i]) > -1e-5

    def test_noiseless_signature_is_location_deterministic(self, default_scene):
        grid = GridConfig(nx=2, ny=1, bounds=(5.0, 5.0, 10.0, 5.0), seed=0)
        args = (default_scene, grid, 0, channel.ArrayConfig(8), FAST_OFDM, channel.PulseShape())
        a = build_dataset(*args)
        b = build_dataset(*args)
        assert np.array_equal(a.signatures, b.signatures)
        assert np.array_equal(a.images, b.images)

    def test_workers_do_not_change_bytes(self, default_scene, tmp_path):
        grid = GridConfig(nx=3, ny=3, bounds=(2.0, 2.0, 28.0, 18.0), seed=11)
        args = (default_scene, grid, 0, channel.ArrayConfig(8), FAST_OFDM, channel.PulseShape())
        seq = build_dataset(*args, snr_db=15.0, workers=1)
        par = build_dataset(*args, snr_db=15.0, workers=2)
        p1, p2 = str(tmp_path / "w1.ccv"), str(tmp_path / "w2.ccv")
        write_dataset(p1, seq)
        write_dataset(p2, par)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_noise_changes_signature_but_not_target(self, default_scene):
        grid = GridConfig(nx=2, ny=2, bounds=(5.0, 5.0, 25.0, 15.0), seed=5)
        args = (default_scene, grid, 0, channel.ArrayConfig(8), FAST_OFDM, channel.PulseShape())
        clean = build_dataset(*args)
        noisy = build_dataset(*args, snr_db=10.0)
        assert not np.array_equal(clean.signatures, noisy.signatures)
        de_c = clean.images.astype(np.float64) * clean.header.norm_cov
        de_n = noisy.images.astype(np.float64) * noisy.header.norm_cov
        assert np.allclose(de_c, de_n, rtol=1e-5, atol=1e-12)

    def test_bounds_outside_street_rejected(self, default_scene):
        grid = GridConfig(nx=2, ny=2, bounds=(0.0, 0.0, 40.0, 10.0), seed=0)
        with pytest.raises(SceneError, match="bounds"):
            build_dataset(
                default_scene, grid, 0, channel.ArrayConfig(8), FAST_OFDM, channel.PulseShape()
            )

    def test_denormalization_recovers_raw_values(self, default_scene):
        grid = GridConfig(nx=2, ny=2, bounds=(5.0, 5.0, 25.0, 15.0), seed=5)
        ds = build_dataset(
            default_scene, grid, 0, channel.ArrayConfig(8), FAST_OFDM, channel.PulseShape()
        )
        rec = build_record(
            default_scene, (5.0, 5.0), 0, channel.ArrayConfig(8), FAST_OFDM,
            channel.PulseShape(), pilot.PilotConfig(),
        )
        sig = ds.signatures[0].astype(np.float64) * ds.header.norm_sig
        img = ds.images[0].astype(np.float64) * ds.header.norm_cov
        assert np.allclose(sig, rec.signature_real, rtol=1e-6, atol=1e-30)
        assert np.allclose(img, rec.cov_image, rtol=1e-5, atol=1e-12 * np.abs(rec.cov_image).max())


class TestSubset:
    def test_subset_header_count(self, small_dataset):
        sub = small_dataset.subset(np.array([0, 3, 5]))
        assert len(sub) == 3
        assert sub.header.norm_cov == small_dataset.header.norm_cov
        assert np.array_equal(sub.signatures[1], small_dataset.signatures[3])
