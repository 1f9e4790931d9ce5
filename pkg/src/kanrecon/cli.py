"""Command-line front end: gen-data, train, reconstruct, eval, ablate."""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import io
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from kanrecon import kspace, metrics, phantom
from kanrecon.config import VALID_ACCELS, ConfigError, RunConfig, default_config, describe_defaults, load_config
from kanrecon.estimator import KanReconstructor
from kanrecon.ndtensor.checkpoint import CheckpointError, atomic_write_bytes, load_checkpoint, save_checkpoint
from kanrecon.ndtensor.tensor import ShapeError

logger = logging.getLogger("kanrecon")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NONFINITE = 4
EXIT_CHECKPOINT = 5
EXIT_MISSING = 6

EXIT_CODES = """exit codes:
  0  success
  2  invalid configuration or arguments
  3  unreadable or unwritable file
  4  non-finite training loss
  5  checkpoint does not match the configured model
  6  reconstructions missing for eval"""

TRAIN_FILE = "train.krec"
EVAL_FILE = "eval.krec"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# io helpers
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def staged_output(out_dir: Path):
    """Yield a scratch directory whose entries are moved into ``out_dir`` on success."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(dir=out_dir, prefix=".stage-"))
    try:
        yield stage
        for entry in sorted(stage.iterdir()):
            target = out_dir / entry.name
            if target.is_dir() and not target.is_symlink():
                shutil.rmtree(target)
            os.replace(entry, target)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_dataset(path: Path) -> np.ndarray:
    if not path.is_file():
        raise CommandError(EXIT_IO, f"missing dataset file {path}")
    return phantom.read_dataset(path).astype(np.float64)


def _mask_for(cfg: RunConfig, width: int, accel: int) -> kspace.SamplingMask:
    cf = cfg.mask.center_fraction if accel == cfg.mask.accel else None
    return kspace.make_mask(width, accel, cf, cfg.mask.seed)


def _estimator(cfg: RunConfig, seed: Optional[int]) -> KanReconstructor:
    return KanReconstructor.from_config(cfg, seed=seed)


def _load_estimator(cfg: RunConfig, seed: Optional[int], ckpt: Path, width: int) -> KanReconstructor:
    if not ckpt.is_file():
        raise CommandError(EXIT_IO, f"missing checkpoint {ckpt}")
    state = load_checkpoint(ckpt)
    try:
        return _estimator(cfg, seed).load_state_dict(state, width)
    except ShapeError as exc:
        raise CommandError(EXIT_CHECKPOINT, f"checkpoint {ckpt} does not fit the configured model: {exc}")


def loss_csv_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.stem + "_loss.csv")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out_path, **_) -> int:
    d = cfg.data
    train = phantom.generate_dataset(d.n_train, d.size, d.seed, d.n_ellipses)
    evals = phantom.generate_dataset(d.n_eval, d.size, d.seed + d.n_train, d.n_ellipses)
    with staged_output(Path(out_path)) as stage:
        phantom.write_dataset(train, stage / TRAIN_FILE)
        phantom.write_dataset(evals, stage / EVAL_FILE)
    print(f"wrote {d.n_train} train and {d.n_eval} eval images of {d.size}x{d.size} to {out_path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, data_path, ckpt_out, seed: Optional[int] = None, **_) -> int:
    images = _read_dataset(Path(data_path) / TRAIN_FILE)
    est = _estimator(cfg, seed)
    start = time.perf_counter()
    try:
        est.fit(images)
    except FloatingPointError as exc:
        raise CommandError(EXIT_NONFINITE, f"training aborted: {exc}")
    ckpt = Path(ckpt_out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    curve = est.loss_curve_
    save_checkpoint(ckpt, est.state_dict())
    write_text(loss_csv_path(ckpt), _csv([(i + 1, repr(v)) for i, v in enumerate(curve)], ("epoch", "loss")))
    print(f"trained {est.epochs} epochs in {time.perf_counter() - start:.1f}s; "
          f"loss {curve[0]:.4f} -> {curve[-1]:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def _af_dir(accel: int) -> str:
    return f"af{accel}"


def cmd_reconstruct(cfg: RunConfig, ckpt, data_path, out_dir, seed: Optional[int] = None,
                    accels: Optional[Sequence[int]] = None, zero_filled_only: bool = False,
                    trace: bool = False, **_) -> int:
    gt = _read_dataset(Path(data_path) / EVAL_FILE)
    n, _h, width = gt.shape
    accels = list(accels or [cfg.mask.accel])
    est = None if zero_filled_only else _load_estimator(cfg, seed, Path(ckpt), width)
    with staged_output(Path(out_dir)) as stage:
        for accel in accels:
            mask = _mask_for(cfg, width, accel)
            obs = kspace.simulate_acquisition(gt, mask)
            zf = kspace.zero_fill(obs)
            sub = stage / _af_dir(accel)
            sub.mkdir()
            kspace.write_mask(mask, sub / "mask.txt")
            phantom.write_dataset(gt, sub / "gt.krec")
            phantom.write_dataset(zf, sub / "zf.krec")
            for i in range(n):
                phantom.write_pgm(gt[i], sub / f"{i:03d}_gt.pgm")
                phantom.write_pgm(zf[i], sub / f"{i:03d}_zf.pgm")
            if est is None:
                print(f"AF={accel}: wrote {2 * n} images (zero-filled only)")
                continue
            est.mask_ = mask
            traces: Dict[int, List[tuple]] = {i: [] for i in range(n)}

            def hook(i, k, t, s_k, x0):
                traces[i].append((k, t, repr(float(s_k)), repr(float(np.mean((x0 - gt[i]) ** 2)))))

            rec = est.predict(obs, on_step=hook if trace else None)
            phantom.write_dataset(rec, sub / "recon.krec")
            for i in range(n):
                phantom.write_pgm(rec[i], sub / f"{i:03d}_recon.pgm")
                if trace:
                    write_text(sub / f"{i:03d}_trace.csv", _csv(traces[i], ("k", "t", "s_k", "mse_to_reference")))
            print(f"AF={accel}: reconstructed {n} images")
    return EXIT_OK


def _report_paths(report_path) -> tuple:
    p = Path(report_path)
    base = p.with_suffix("") if p.suffix in (".csv", ".json") else p
    return base.with_suffix(".csv"), base.with_suffix(".json")


def evaluate_dir(out_dir, source: str = "recon") -> List[metrics.MetricReport]:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise CommandError(EXIT_IO, f"missing output directory {out_dir}")
    dirs = sorted((p for p in out_dir.iterdir() if p.is_dir() and p.name.startswith("af")
                   and p.name[2:].isdigit()), key=lambda p: int(p.name[2:]))
    if not dirs:
        raise CommandError(EXIT_MISSING, f"no reconstruction directories under {out_dir}")
    reports = []
    for d in dirs:
        gt_path, test_path = d / "gt.krec", d / f"{source}.krec"
        if not gt_path.is_file() or not test_path.is_file():
            raise CommandError(EXIT_MISSING, f"{d} lacks {gt_path.name} or {test_path.name}")
        gt = phantom.read_dataset(gt_path).astype(np.float64)
        test = phantom.read_dataset(test_path).astype(np.float64)
        if gt.shape != test.shape:
            raise CommandError(EXIT_MISSING, f"{test_path} holds {test.shape[0]} images, expected {gt.shape[0]}")
        report = metrics.MetricReport.from_images(int(d.name[2:]), gt, test)
        report.meta["source"] = source
        reports.append(report)
    return reports


def cmd_eval(out_dir, report_path, source: str = "recon", **_) -> int:
    reports = evaluate_dir(out_dir, source)
    csv_path, json_path = _report_paths(report_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write_text(csv_path, metrics.reports_to_csv(reports))
    write_text(json_path, metrics.reports_to_json(reports))
    for r in reports:
        print(f"AF={r.af} PSNR={r.psnr:.3f} SSIM={r.ssim:.4f} NMSE={r.nmse:.5f} (n={r.n_images}, {source})")
    return EXIT_OK


ABLATION_VARIANTS = (
    ("full", {}),
    ("no_mf", {"mf": False}),
    ("no_tokkan", {"tokkan": False}),
    ("no_dynamic_clip", {"dynamic_clip": False}),
)
ABLATION_HEADER = ("variant", "mf", "tokkan", "dynamic_clip", "af", "psnr", "ssim", "nmse", "n_images")


def _variant(cfg: RunConfig, changes: dict) -> RunConfig:
    out = copy.deepcopy(cfg)
    for key, value in changes.items():
        setattr(out.ablation, key, value)
    return out


def cmd_ablate(cfg: RunConfig, data_path, out_dir, seed: Optional[int] = None, **_) -> int:
    """Train and evaluate every ablation variant; writes ``ablation.csv``.

    Dynamic clipping only acts at sampling time, so that variant reuses
    the full model's weights.
    """
    train_imgs = _read_dataset(Path(data_path) / TRAIN_FILE)
    gt = _read_dataset(Path(data_path) / EVAL_FILE)
    rows, trained = [], {}
    for name, changes in ABLATION_VARIANTS:
        vcfg = _variant(cfg, changes)
        est = _estimator(vcfg, seed)
        key = (est.mf_enabled, est.use_tokkan)
        try:
            if key in trained:
                est.load_state_dict(trained[key], train_imgs.shape[-1])
            else:
                est.fit(train_imgs)
                trained[key] = est.state_dict()
        except FloatingPointError as exc:
            raise CommandError(EXIT_NONFINITE, f"variant {name}: {exc}")
        obs = est.acquire(gt)
        report = metrics.MetricReport.from_images(est.accel, gt, est.predict(obs))
        a = vcfg.ablation
        rows.append((name, a.mf, a.tokkan, a.dynamic_clip, report.af,
                     repr(report.psnr), repr(report.ssim), repr(report.nmse), report.n_images))
        print(f"{name}: PSNR={report.psnr:.3f} SSIM={report.ssim:.4f} NMSE={report.nmse:.5f}")
    best = max(rows, key=lambda r: float(r[5]))[0]
    print(f"highest PSNR: {best}" + ("" if best == "full" else " (full model not best at this scale)"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "ablation.csv", _csv(rows, ABLATION_HEADER))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _accel_list(text: str) -> List[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    bad = [v for v in vals if v not in VALID_ACCELS]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"accel must be drawn from {{4, 6, 8, 10}}, got {text!r}")
    return vals


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS,
                        help="JSON run configuration (defaults listed below)")
    common.add_argument("--seed", type=_u64, default=argparse.SUPPRESS,
                        help="override train.seed (weights, batch order, sampler)")
    common.add_argument("--threads", type=_positive, default=argparse.SUPPRESS,
                        help="BLAS thread limit; 1 gives the deterministic mode")
    common.add_argument("--trace", action="store_true", default=argparse.SUPPRESS,
                        help="write per-image sampler traces (reconstruct)")
    epilog = f"config defaults:\n{describe_defaults()}\n\n{EXIT_CODES}\n\nlogging: KANRECON_LOG=error|info|debug"
    p = argparse.ArgumentParser(prog="kanrecon", parents=[common], epilog=epilog,
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                description="KAN diffusion MRI reconstruction on synthetic phantoms.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write train/eval phantom datasets")
    g.add_argument("--out", type=Path, required=True, help="output directory")

    t = sub.add_parser("train", parents=[common], help="train the denoiser and save a checkpoint")
    t.add_argument("--data", type=Path, required=True, help="directory written by gen-data")
    t.add_argument("--ckpt", type=Path, required=True, help="checkpoint output path")

    r = sub.add_parser("reconstruct", parents=[common], help="reconstruct the eval set")
    r.add_argument("--data", type=Path, required=True)
    r.add_argument("--ckpt", type=Path, help="checkpoint (not needed with --zero-filled-only)")
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--accel", type=_accel_list, help="comma-separated AFs (default: mask.accel)")
    r.add_argument("--zero-filled-only", action="store_true", help="skip the model; write gt and zero-filled")

    e = sub.add_parser("eval", parents=[common], help="score reconstructions per AF")
    e.add_argument("--out", type=Path, required=True, help="directory written by reconstruct")
    e.add_argument("--report", type=Path, required=True, help="report path; .csv and .json are written")
    e.add_argument("--source", choices=("recon", "zf"), default="recon")

    a = sub.add_parser("ablate", parents=[common], help="train and compare the ablation variants")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    return p


def _setup_logging() -> None:
    level = os.environ.get("KANRECON_LOG", "error").strip().lower()
    if level not in LOG_LEVELS:
        raise CommandError(EXIT_CONFIG, f"KANRECON_LOG must be one of error, info, debug; got {level!r}")
    logger.setLevel(LOG_LEVELS[level])
    if not logger.handlers:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(h)


def _dispatch(args, cfg: RunConfig) -> int:
    seed = getattr(args, "seed", None)
    if args.command == "gen-data":
        return cmd_gen_data(cfg, args.out)
    if args.command == "train":
        return cmd_train(cfg, args.data, args.ckpt, seed=seed)
    if args.command == "reconstruct":
        if args.ckpt is None and not args.zero_filled_only:
            raise CommandError(EXIT_CONFIG, "reconstruct needs --ckpt unless --zero-filled-only is given")
        return cmd_reconstruct(cfg, args.ckpt, args.data, args.out, seed=seed, accels=args.accel,
                               zero_filled_only=args.zero_filled_only, trace=getattr(args, "trace", False))
    if args.command == "eval":
        return cmd_eval(args.out, args.report, source=args.source)
    if args.command == "ablate":
        return cmd_ablate(cfg, args.data, args.out, seed=seed)
    raise CommandError(EXIT_CONFIG, f"unknown command {args.command}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        _setup_logging()
        cfg_path = getattr(args, "config", None)
        try:
            cfg = load_config(cfg_path) if cfg_path is not None else default_config()
        except OSError as exc:
            raise ConfigError(str(cfg_path), f"cannot read config: {exc.strerror or exc}")
        with threadpool_limits(limits=getattr(args, "threads", None)):
            return _dispatch(args, cfg)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except kspace.MaskError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, phantom.DatasetError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
