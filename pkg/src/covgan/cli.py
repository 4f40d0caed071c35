"""Command-line entry point: build-dataset, train, eval, export-images.

Exit codes: 0 ok, 2 configuration error, 3 model/data compatibility error,
4 runtime or numeric error. Every command validates its inputs before doing
work and writes outputs atomically, so failures leave no partial files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .channel import ArrayConfig, ChannelError, OfdmConfig, PulseShape
from .dataset import (
    Dataset,
    DatasetFormatError,
    GridConfig,
    atomic_write,
    build_dataset,
    read_dataset,
    split,
    write_dataset,
)
from .pilot import PilotError
from .scene import Scene, SceneConfig, SceneError, build_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COMPAT = 3
EXIT_RUNTIME = 4

DETERMINISM_NOTE = (
    "dataset build and image export are bit-exact given (config, seed); "
    "training is reproducible given the seed up to the determinism of the "
    "underlying float32 torch CPU/GPU kernels"
)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path: str, payload: dict) -> None:
    payload = dict(payload)
    payload["tool_version"] = __version__
    payload["numeric_determinism"] = DETERMINISM_NOTE
    atomic_write(out_path + ".manifest.json", json.dumps(payload, indent=2, sort_keys=True).encode())


# --- scene config file ------------------------------------------------------

_SCENE_SCALARS = {
    "street_length_m": float,
    "street_width_m": float,
    "ground_z": float,
    "bs_height_m": float,
    "user_height_m": float,
    "carrier_hz": float,
    "reflection_coeff": float,
    "max_bounces": int,
    "max_paths": int,
}


def parse_scene_config(path: str) -> SceneConfig:
    """Flat key=value UTF-8 text, keys matching SceneConfig field names (SI units)."""
    if not os.path.exists(path):
        raise CliError(EXIT_CONFIG, f"scene config not found: {path}")
    values: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(EXIT_CONFIG, f"{path}:{lineno}: expected key=value")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            try:
                if key in _SCENE_SCALARS:
                    values[key] = _SCENE_SCALARS[key](val)
                elif key == "wall_y":
                    a, b = (float(t) for t in val.split(","))
                    values[key] = (a, b)
                elif key == "bs_positions":
                    values[key] = val  # resolved below, may need bs_height_m
                else:
                    raise CliError(EXIT_CONFIG, f"{path}:{lineno}: unknown key {key!r}")
            except (ValueError, TypeError) as exc:
                raise CliError(EXIT_CONFIG, f"{path}:{lineno}: bad value for {key}: {exc}") from exc

    defaults = SceneConfig()
    height = values.get("bs_height_m", defaults.bs_height_m)
    if "bs_positions" in values:
        positions = []
        for entry in values["bs_positions"].split(";"):
            coords = [float(t) for t in entry.split(",")]
            if len(coords) == 2:
                coords.append(height)  # 2D entries sit at the configured BS height
            if len(coords) != 3:
                raise CliError(EXIT_CONFIG, f"bad bs_positions entry {entry!r}")
            positions.append(tuple(coords))
        values["bs_positions"] = tuple(positions)
    try:
        return SceneConfig(**values)
    except TypeError as exc:
        raise CliError(EXIT_CONFIG, f"bad scene config: {exc}") from exc


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        nx, ny = (int(t) for t in text.lower().split("x"))
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"--grid expects NXxNY, got {text!r}") from exc
    if nx < 1 or ny < 1:
        raise CliError(EXIT_CONFIG, "--grid dimensions must be >= 1")
    return nx, ny


def _parse_bounds(text: str | None, scene: Scene) -> tuple[float, float, float, float]:
    if text is None:
        cfg = scene.config
        return (0.0, 0.0, cfg.street_length_m, cfg.street_width_m)
    try:
        x0, y0, x1, y1 = (float(t) for t in text.split(","))
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"--bounds expects x0,y0,x1,y1, got {text!r}") from exc
    return (x0, y0, x1, y1)


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"{flag} expects comma-separated integers") from exc


# --- commands ----------------------------------------------------------------


def cmd_build_dataset(args) -> int:
    scene_cfg = parse_scene_config(args.scene)
    try:
        scene = build_scene(scene_cfg)
        nx, ny = _parse_grid(args.grid)
        grid = GridConfig(nx=nx, ny=ny, bounds=_parse_bounds(args.bounds, scene), seed=args.seed)
        array = ArrayConfig(m_antennas=args.m_antennas)
        ofdm = OfdmConfig(
            k_subcarriers=args.subcarriers, d_taps=args.taps, sample_period_s=args.sample_period_s
        )
        pulse = PulseShape(rolloff=args.rolloff, span_taps=args.span_taps)
        if not 0 <= args.target_bs < scene.n_bs:
            raise SceneError(f"--target-bs {args.target_bs} out of range for {scene.n_bs} BSs")
    except (SceneError, ChannelError, PilotError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc

    try:
        ds = build_dataset(
            scene, grid, args.target_bs, array, ofdm, pulse,
            snr_db=args.snr_db, workers=args.workers,
        )
        write_dataset(args.out, ds)
    except SceneError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    except (ChannelError, FloatingPointError) as exc:
        raise CliError(EXIT_RUNTIME, str(exc)) from exc

    _write_manifest(
        args.out,
        {
            "command": "build-dataset",
            "scene_file": args.scene,
            "scene_file_sha256": _sha256_file(args.scene),
            "scene": asdict(scene_cfg),
            "grid": {"nx": nx, "ny": ny, "bounds": list(grid.bounds), "seed": grid.seed},
            "target_bs": args.target_bs,
            "array": asdict(array),
            "ofdm": asdict(ofdm),
            "pulse": asdict(pulse),
            "snr_db": args.snr_db,
            "workers": args.workers,
            "outputs": {
                "dataset": args.out,
                "dataset_sha256": _sha256_file(args.out),
                "header_digest": ds.header.digest(),
            },
        },
    )
    print(f"wrote {ds.header.count} records to {args.out} "
          f"(M={ds.header.m}, N={ds.header.n_bs}, K={ds.header.k_sub})")
    return EXIT_OK


def _read_dataset_checked(path: str) -> Dataset:
    if not os.path.exists(path):
        raise CliError(EXIT_CONFIG, f"dataset not found: {path}")
    try:
        return read_dataset(path)
    except DatasetFormatError as exc:
        raise CliError(EXIT_CONFIG, f"unreadable dataset {path}: {exc}") from exc


def cmd_train(args) -> int:
    from .gan import GanConfigError, NanLossError, TrainConfig, save_checkpoint, train

    ds = _read_dataset_checked(args.data)
    try:
        cfg = TrainConfig(
            learning_rate=args.lr,
            beta1=args.beta1,
            batch_size=args.batch,
            epochs=args.epochs,
            seed=args.seed,
            saturating=args.saturating,
            z_dim=args.z_dim,
            base_channels=args.base_channels,
            checkpoint_every=args.checkpoint_every,
            checkpoint_path=args.out if args.checkpoint_every > 0 else None,
            val_every=args.val_every,
            device=args.device,
        )
    except GanConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc

    if not 0.0 <= args.val_fraction < 1.0:
        raise CliError(EXIT_CONFIG, "--val-fraction must be in [0, 1)")
    try:
        if args.val_fraction > 0.0 and len(ds) >= 2:
            train_set, val_set = split(ds, 1.0 - args.val_fraction, args.seed)
        else:
            train_set, val_set = ds, None
    except DatasetFormatError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc

    try:
        model, log = train(train_set, val_set, cfg)
    except GanConfigError as exc:
        raise CliError(EXIT_COMPAT, str(exc)) from exc
    except NanLossError as exc:
        raise CliError(EXIT_RUNTIME, str(exc)) from exc

    save_checkpoint(model, args.out)
    atomic_write(args.out + ".log.json", log.to_json().encode("utf-8"))
    _write_manifest(
        args.out,
        {
            "command": "train",
            "data": args.data,
            "data_header_digest": ds.header.digest(),
            "train_config": asdict(cfg),
            "val_fraction": args.val_fraction,
            "outputs": {"checkpoint": args.out, "log": args.out + ".log.json"},
        },
    )
    last = log.entries[-1]
    print(f"trained {cfg.epochs} epochs: loss_d={last.loss_d:.4f} loss_g={last.loss_g:.4f}"
          + (f" val_nmse={last.val_nmse:.4f}" if last.val_nmse is not None else ""))
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _load_model_checked(path: str):
    from .gan import GanConfigError, load_checkpoint

    if not os.path.exists(path):
        raise CliError(EXIT_CONFIG, f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (GanConfigError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_CONFIG, f"unreadable checkpoint {path}: {exc}") from exc


def _check_compat(model, ds: Dataset) -> None:
    h = ds.header
    problems = []
    if model.model_cfg.m_antennas != h.m:
        problems.append(f"model M={model.model_cfg.m_antennas} vs dataset M={h.m}")
    if model.model_cfg.cond_dim != h.sig_width:
        problems.append(f"model condition width {model.model_cfg.cond_dim} vs dataset {h.sig_width}")
    if (model.n_bs, model.k_sub) != (h.n_bs, h.k_sub):
        problems.append("basestation/subcarrier counts differ")
    if model.scene_digest != h.scene_digest:
        problems.append("scene digest mismatch")
    if model.norm_sig != h.norm_sig or model.norm_cov != h.norm_cov:
        problems.append("normalization constants differ from the training dataset")
    if problems:
        raise CliError(EXIT_COMPAT, "checkpoint incompatible with dataset: " + "; ".join(problems))


def cmd_eval(args) -> int:
    from dataclasses import replace

    from .evaluation import (
        EvalReport,
        baseline_knn,
        baseline_mean_nmse,
        curve_nmse_vs_size,
        model_nmse,
        nmse,
        true_covariances,
    )
    from .gan import NanLossError

    model = _load_model_checked(args.model)
    ds = _read_dataset_checked(args.data)
    _check_compat(model, ds)

    import time

    t0 = time.perf_counter()
    if args.sizes:
        sizes = _int_list(args.sizes, "--sizes")
        seeds = _int_list(args.seeds, "--seeds")
        sweep_cfg = replace(
            model.train_cfg,
            epochs=args.sweep_epochs or model.train_cfg.epochs,
            checkpoint_every=0,
            checkpoint_path=None,
        )
        try:
            report = curve_nmse_vs_size(ds, sizes, sweep_cfg, seeds, z_policy=args.z_policy)
        except NanLossError as exc:
            raise CliError(EXIT_RUNTIME, str(exc)) from exc
        for size in sizes:
            print(f"size {size}: median test NMSE {report.median_per_size[str(size)]:.4f}")
        print(f"baseline (mean predictor): {report.baseline_nmse['mean_predictor']:.4f}")
    else:
        if args.test_fraction > 0.0:
            fit_set, eval_set = split(ds, 1.0 - args.test_fraction, model.train_cfg.seed)
        else:
            fit_set, eval_set = ds, ds
        per_sample = model_nmse(model, eval_set, z_policy=args.z_policy)
        report = EvalReport(
            mean_nmse=float(np.mean(per_sample)),
            median_nmse=float(np.median(per_sample)),
            per_sample_nmse=[float(v) for v in per_sample],
            baseline_nmse={"mean_predictor": baseline_mean_nmse(fit_set, eval_set)},
        )
        if args.test_fraction > 0.0:
            truth = true_covariances(eval_set)
            knn = [
                nmse(baseline_knn(fit_set, eval_set.signatures[i], args.knn_k), truth[i])
                for i in range(len(eval_set))
            ]
            report.baseline_nmse["knn"] = float(np.mean(knn))
        report.runtime_s = time.perf_counter() - t0
        print(f"mean NMSE {report.mean_nmse:.4f} over {len(eval_set)} records")
        for name, value in report.baseline_nmse.items():
            print(f"baseline ({name}): {value:.4f}")

    report.save(args.out)
    _write_manifest(
        args.out,
        {
            "command": "eval",
            "model": args.model,
            "data": args.data,
            "data_header_digest": ds.header.digest(),
            "sizes": args.sizes,
            "seeds": args.seeds,
            "z_policy": args.z_policy,
            "test_fraction": args.test_fraction,
            "outputs": {"report": args.out},
        },
    )
    print(f"report written to {args.out}")
    return EXIT_OK


def cmd_export_images(args) -> int:
    from .evaluation import export_cov_image, true_covariances
    from .gan import predict

    model = _load_model_checked(args.model)
    ds = _read_dataset_checked(args.data)
    _check_compat(model, ds)
    if args.count < 0:
        raise CliError(EXIT_CONFIG, "--count must be >= 0")

    os.makedirs(args.out, exist_ok=True)
    count = min(args.count, len(ds))
    written = []
    if count > 0:
        subset = ds.subset(np.arange(count))
        truths = true_covariances(subset)
        preds = predict(model, subset.signatures, z_policy=args.z_policy)
        for i in range(count):
            for tag, mat in (("truth", truths[i]), ("pred", preds[i])):
                path = os.path.join(args.out, f"{tag}_{i:04d}_{args.plane}.pgm")
                export_cov_image(mat, args.plane, path)
                written.append(path)
    _write_manifest(
        os.path.join(args.out, "export"),
        {
            "command": "export-images",
            "model": args.model,
            "data": args.data,
            "count": count,
            "plane": args.plane,
            "z_policy": args.z_policy,
            "outputs": {"directory": args.out, "files": written},
        },
    )
    print(f"wrote {len(written)} images to {args.out}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covgan", description=__doc__)
    p.add_argument("--version", action="version", version=f"covgan {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-dataset", help="sweep a user grid and write a CCV1 dataset")
    b.add_argument("--scene", required=True, help="scene config file (key=value)")
    b.add_argument("--grid", required=True, help="grid size as NXxNY, e.g. 200x300")
    b.add_argument("--target-bs", type=int, default=0, help="0-based BS whose covariance is the target")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--bounds", default=None, help="x0,y0,x1,y1 (default: full street)")
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--snr-db", type=float, default=None, help="pilot SNR; omit for noiseless")
    b.add_argument("--m-antennas", type=int, default=32)
    b.add_argument("--subcarriers", type=int, default=64)
    b.add_argument("--taps", type=int, default=64)
    b.add_argument("--sample-period-s", type=float, default=2e-9)
    b.add_argument("--rolloff", type=float, default=0.8)
    b.add_argument("--span-taps", type=int, default=8)
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="train the conditional GAN on a CCV1 dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch", type=int, default=256)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--beta1", type=float, default=0.5)
    t.add_argument("--z-dim", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--base-channels", type=int, default=None)
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--val-every", type=int, default=1)
    t.add_argument("--checkpoint-every", type=int, default=0, help="write the checkpoint every k epochs")
    t.add_argument("--saturating", action="store_true", help="use the saturating generator loss")
    t.add_argument("--device", default="cpu")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint; optionally sweep training sizes")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="JSON report path")
    e.add_argument("--sizes", default=None, help="comma-separated training sizes to sweep")
    e.add_argument("--seeds", default="0", help="comma-separated seeds for the sweep")
    e.add_argument("--sweep-epochs", type=int, default=None)
    e.add_argument("--test-fraction", type=float, default=0.0,
                   help="hold out this fraction for evaluation (0 = evaluate on all records)")
    e.add_argument("--knn-k", type=int, default=1)
    e.add_argument("--z-policy", default="fixed-zero",
                   choices=["fixed-zero", "seeded-random", "average-of-n"])
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-images", help="write paired truth/prediction graymaps")
    x.add_argument("--model", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True, help="output directory")
    x.add_argument("--count", type=int, default=5)
    x.add_argument("--plane", default="real", choices=["real", "imag"])
    x.add_argument("--z-policy", default="fixed-zero",
                   choices=["fixed-zero", "seeded-random", "average-of-n"])
    x.set_defaults(func=cmd_export_images)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SceneError, PilotError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ChannelError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
