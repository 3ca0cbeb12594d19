"""Command-line entry point.

    vesselfield phantom     --config run.json
    vesselfield simulate    --config run.json [--views orthogonal|clinical]
    vesselfield reconstruct --config run.json [--seed N] [--encoder hash|frequency]
    vesselfield evaluate    --config run.json  (or --volume R.raw --ground-truth G.raw)
    vesselfield aso         A.csv B.csv [--threshold 0.5]
    vesselfield aggregate   cases*.csv --out table.csv

With one config the four pipeline stages find each other's files under
``output_dir``. Exit codes: 0 success, 2 config error, 3 numerical failure,
4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_hash, load_config
from .geometry import GeometryError, clinical_range_warnings
from .metrics import SKELETON_METHOD, GroundTruthCache, MetricsReport
from .phantom import PhantomError, generate_phantom
from .stats import aso_test
from .trainer import NumericalFailure, binarize, train
from .volume_io import VolumeFileError, load_projection, load_volume, save_volume, simulate_inputs

log = logging.getLogger("vesselfield")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
METRIC_COLUMNS = ["cl_dice", "dice", "iou", "re_error", "chamfer_l2", "re_mse"]
LOWER_IS_BETTER = {"re_error", "chamfer_l2", "re_mse", "re_error_continuous", "re_mse_continuous"}


def phantom_path(cfg: RunConfig) -> Path:
    return cfg.output_dir / "phantom" / "phantom.raw"


def projection_dir(cfg: RunConfig) -> Path:
    return cfg.output_dir / "projections" / cfg.views


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.views}-{cfg.encoder_kind}-seed{cfg.seed}-{config_hash(cfg.raw)[:10]}"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _versions() -> dict:
    import scipy
    import skimage

    return {"vesselfield": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-image": skimage.__version__}


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=getattr(args, "seed", None), encoder=getattr(args, "encoder", None),
                              views=getattr(args, "views", None))


def cmd_phantom(args) -> int:
    cfg = _load_cfg(args)
    vol = generate_phantom(cfg.phantom, cfg.grid)
    out = Path(args.out) if args.out else phantom_path(cfg)
    save_volume(out, vol, kind="binary")
    print(f"phantom: {int(vol.data.sum())} foreground voxels -> {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    src = Path(args.volume) if args.volume else phantom_path(cfg)
    vol, _ = load_volume(src, expect_dims=[cfg.grid.nx, cfg.grid.ny, cfg.grid.nz])
    if cfg.views == "clinical":
        clinical_range_warnings(cfg.geoms, args.anatomy)  # warns, never fails
    out = Path(args.out) if args.out else projection_dir(cfg)
    imgs = simulate_inputs(vol, cfg.geoms, cfg.projector, out_dir=out, noise_std=cfg.noise_std,
                           seed=cfg.seed, png=args.png)
    for im in imgs:
        print(f"view {im.view_id}: mass {float(im.data.sum()):.6g} -> {out / f'view{im.view_id}.raw'}")
    return EXIT_OK


def _metric_row(rep: MetricsReport):
    return [getattr(rep, c) for c in METRIC_COLUMNS]


def cmd_reconstruct(args) -> int:
    cfg = _load_cfg(args)
    pdir = Path(args.projections) if args.projections else projection_dir(cfg)
    imgs = [load_projection(pdir / f"view{i}.raw") for i in range(len(cfg.geoms))]
    for im, g in zip(imgs, cfg.geoms):
        if im.geometry != g:
            raise ConfigError(f"projection view {im.view_id} was simulated with a different geometry")
    gt = None
    gt_path = Path(args.ground_truth) if args.ground_truth else phantom_path(cfg)
    if args.ground_truth or gt_path.with_suffix(".json").exists():
        gt, _ = load_volume(gt_path, expect_dims=[cfg.grid.nx, cfg.grid.ny, cfg.grid.nz])
    out = cfg.output_dir / (args.run_id or run_id(cfg))
    out.mkdir(parents=True, exist_ok=True)

    losses = []
    metric_rows = []

    def on_record(rec):
        losses.append((rec.iteration, rec.loss))
        if rec.iteration > 0 and rec.iteration % cfg.train.log_every == 0:
            row = [rec.iteration, rec.loss]
            row += _metric_row(rec.metrics) if rec.metrics is not None else [None] * len(METRIC_COLUMNS)
            metric_rows.append(row)

    t0 = time.time()
    snap = out / "snapshot.npz"
    try:
        res = train([im.data for im in imgs], cfg.geoms, cfg.grid, cfg.mlp, cfg.train, cfg.encoder,
                    encoder=cfg.encoder_kind, n_frequencies=cfg.n_frequencies, ground_truth=gt,
                    projector_cfg=cfg.projector, resume=args.resume, table_init_scale=cfg.table_init_scale,
                    callback=on_record, snapshot_every=cfg.snapshot_every,
                    snapshot_path=str(snap) if cfg.snapshot_every else None)
    finally:
        _write_csv(out / "loss.csv", ["iteration", "loss"], losses)
        _write_csv(out / "metrics.csv", ["iteration", "loss"] + METRIC_COLUMNS, metric_rows)
    elapsed = time.time() - t0

    save_volume(out / "volume_final.raw", res.volume, kind="continuous")
    summary = []
    if gt is not None:
        cache = GroundTruthCache(gt)
        for thr in cfg.thresholds:
            save_volume(out / f"volume_binary_{thr:g}.raw", binarize(res.volume, thr), kind="binary")
            rep = cache.report(res.volume, thr, cfg.train.iterations)
            summary.append(rep.as_row())
        _write_csv(out / "final_metrics.csv", list(summary[0]), [list(r.values()) for r in summary])
    manifest = {
        "run_id": out.name,
        "config_hash": config_hash(cfg.raw),
        "config": cfg.raw,
        "seed": cfg.seed,
        "deterministic": bool(args.deterministic),
        "threads": args.threads,
        "versions": _versions(),
        "skeleton_method": SKELETON_METHOD,
        "elapsed_s": elapsed,
        "initial_loss": losses[0][1] if losses else None,
        "final_loss": losses[-1][1] if losses else None,
        "final_metrics": summary,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"run {out.name}: loss {losses[0][1]:.6g} -> {losses[-1][1]:.6g} in {elapsed:.1f} s; outputs in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.volume:
        vol_path = Path(args.volume)
        gt_path = Path(args.ground_truth) if args.ground_truth else None
        thresholds = args.thresholds or [0.4, 0.5, 0.6]
        case = args.case or vol_path.stem
    else:
        if not args.config:
            raise ConfigError("evaluate needs --config or --volume")
        cfg = _load_cfg(args)
        vol_path = cfg.output_dir / (args.run_id or run_id(cfg)) / "volume_final.raw"
        gt_path = Path(args.ground_truth) if args.ground_truth else phantom_path(cfg)
        thresholds = args.thresholds or list(cfg.thresholds)
        case = args.case or vol_path.parent.name
    if gt_path is None:
        raise ConfigError("evaluate needs --ground-truth")
    recon, _ = load_volume(vol_path)
    gt, _ = load_volume(gt_path, expect_dims=[recon.nx, recon.ny, recon.nz])
    cache = GroundTruthCache(gt)
    rows = []
    for thr in thresholds:
        rep = cache.report(recon, thr)
        rows.append([case] + [v for k, v in rep.as_row().items() if k != "iteration"])
    header = ["case"] + [k for k in MetricsReport.__dataclass_fields__ if k != "iteration"]
    out = Path(args.out) if args.out else vol_path.parent / "evaluation.csv"
    _write_csv(out, header, rows)
    for r in rows:
        print(", ".join(f"{h}={_fmt(v)}" for h, v in zip(header, r)))
    return EXIT_OK


def _read_cases(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _column(rows, metric, threshold):
    vals = []
    for r in rows:
        if threshold is not None and "threshold" in r and abs(float(r["threshold"]) - threshold) > 1e-9:
            continue
        if r.get(metric, "") != "":
            vals.append(float(r[metric]))
    return np.array(vals)


def cmd_aso(args) -> int:
    a_rows, b_rows = _read_cases(args.a), _read_cases(args.b)
    out = {"alpha": args.alpha, "tau": args.tau, "n_bootstrap": args.n_bootstrap, "seed": args.seed,
           "threshold": args.threshold, "metrics": {}}
    for metric in args.metrics:
        a = _column(a_rows, metric, args.threshold)
        b = _column(b_rows, metric, args.threshold)
        if a.size == 0 or b.size == 0:
            out["metrics"][metric] = {"epsilon_min": None, "dominant": None, "note": "no samples"}
            continue
        sign = -1.0 if metric in LOWER_IS_BETTER else 1.0
        res = aso_test(sign * a, sign * b, args.alpha, args.n_bootstrap, args.seed, args.tau)
        out["metrics"][metric] = {"epsilon_min": res.epsilon_min, "violation_ratio": res.violation_ratio,
                                  "dominant": res.dominant, "n_a": int(a.size), "n_b": int(b.size),
                                  "lower_is_better": metric in LOWER_IS_BETTER}
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_aggregate(args) -> int:
    rows = []
    for p in args.inputs:
        rows.extend(_read_cases(p))
    if not rows:
        raise ConfigError("no case rows to aggregate")
    thresholds = sorted({float(r["threshold"]) for r in rows})
    header = ["threshold", "n"]
    for m in args.metrics:
        header += [f"{m}_mean", f"{m}_std"]
    table = []
    for thr in thresholds:
        line = [thr, sum(1 for r in rows if abs(float(r["threshold"]) - thr) < 1e-9)]
        for m in args.metrics:
            v = _column(rows, m, thr)
            line += [float(v.mean()) if v.size else None, float(v.std(ddof=1)) if v.size > 1 else None]
        table.append(line)
    _write_csv(Path(args.out), header, table)
    for line in table:
        print(", ".join(f"{h}={_fmt(v)}" for h, v in zip(header, line)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default: library choice)")
    common.add_argument("--deterministic", action="store_true",
                        help="pin BLAS to one thread so every reduction has a fixed order")
    common.add_argument("-v", "--verbose", action="store_true")

    withcfg = argparse.ArgumentParser(add_help=False, parents=[common])
    withcfg.add_argument("--config", help="run configuration (JSON)")
    withcfg.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    withcfg.add_argument("--encoder", choices=["hash", "frequency"], default=None)
    withcfg.add_argument("--views", default=None, help="geometry block, e.g. orthogonal or clinical")

    p = argparse.ArgumentParser(prog="vesselfield", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[withcfg], help="generate a synthetic vessel tree")
    s.add_argument("--out")
    s.set_defaults(func=cmd_phantom, needs_config=True)

    s = sub.add_parser("simulate", parents=[withcfg], help="project a volume into the input views")
    s.add_argument("--volume")
    s.add_argument("--out")
    s.add_argument("--png", action="store_true", help="also write 16-bit PNG previews")
    s.add_argument("--anatomy", choices=["RCA", "LAD"], default="RCA")
    s.set_defaults(func=cmd_simulate, needs_config=True)

    s = sub.add_parser("reconstruct", parents=[withcfg], help="fit the occupancy field to the views")
    s.add_argument("--projections")
    s.add_argument("--ground-truth")
    s.add_argument("--run-id")
    s.add_argument("--resume", help="snapshot file to continue from")
    s.set_defaults(func=cmd_reconstruct, needs_config=True)

    s = sub.add_parser("evaluate", parents=[withcfg], help="score a reconstruction")
    s.add_argument("--volume")
    s.add_argument("--ground-truth")
    s.add_argument("--run-id")
    s.add_argument("--case")
    s.add_argument("--thresholds", type=float, nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate, needs_config=False)

    s = sub.add_parser("aso", parents=[common], help="almost-stochastic-order comparison of two case CSVs")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--metrics", nargs="+", default=METRIC_COLUMNS)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--tau", type=float, default=0.2)
    s.add_argument("--n-bootstrap", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_aso, needs_config=False)

    s = sub.add_parser("aggregate", parents=[common], help="mean and std per metric per threshold")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--metrics", nargs="+", default=METRIC_COLUMNS)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_aggregate, needs_config=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.needs_config and not args.config:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    threads = 1 if args.deterministic else args.threads
    if threads is not None and threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except (ConfigError, GeometryError, PhantomError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as e:
        print(f"numerical failure: {e} (last snapshot: {e.snapshot})", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, VolumeFileError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
