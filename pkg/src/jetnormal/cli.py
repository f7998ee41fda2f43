"""Command-line entry point: ``jetnormal <command> ...``.

Every command writes its outputs plus a ``manifest.json`` into ``--out-dir``.
The manifest records the resolved arguments, configuration, seed, versions
and the SHA-256 of each output, so ``jetnormal rerun manifest.json`` can
replay the command and check the outputs are byte-identical.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, experiments, fileio, micronet, synth
from .cloud import PointCloud, build_index
from .estimators import EstimatorConfig, estimate_normals, fit_prepared, prepare_query
from .evaluation import angle_error, auc_curve, error_map_export, rmse
from .jet import FitProblem, SingularFitError
from .sensitivity import finite_difference_dnormal, sensitivity_report

logger = logging.getLogger("jetnormal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"

#: FD agreement is relative to max(|fd|, FD_FLOOR * max_j |fd_j|)
FD_FLOOR = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- manifests ---------------------------------------------------------------


def _environment() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "platform": platform.platform()}


def _resolved_args(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in vars(args).items():
        if k == "func":
            continue
        if isinstance(v, Path):
            v = str(v.resolve())
        elif isinstance(v, (list, tuple)):
            v = list(v)
        out[k] = v
    return out


def write_manifest(out_dir: Path, args, outputs, config=None, seed=None) -> Path:
    manifest = {
        "command": args.command,
        "args": _resolved_args(args),
        "config": config,
        "seed": seed,
        "version": __version__,
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "environment": _environment(),
        "rng": synth.RNG_NAME,
        "outputs": {Path(p).name: fileio.sha256(p) for p in outputs},
    }
    return fileio.write_json(out_dir / MANIFEST, manifest)


def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_config(args) -> EstimatorConfig:
    d = {}
    if args.config is not None:
        d = fileio.read_json(args.config)
        if not isinstance(d, dict):
            raise UsageError(f"{args.config}: estimator config must be a JSON object")
    if args.order is not None:
        d["order"] = args.order
    if args.scales is not None:
        d["scales"] = args.scales
    try:
        return EstimatorConfig.from_dict(d, model_loader=micronet.load_model)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid estimator config: {exc}") from None


def _read_cloud(path, normals=None) -> PointCloud:
    pts = fileio.read_xyz(path)
    if len(pts) == 0:
        raise fileio.DataError(f"{path}: no points")
    gt = None
    if normals is not None:
        gt = fileio.read_normals(normals)
        if len(gt) != len(pts):
            raise fileio.DataError(f"{normals}: {len(gt)} normals for {len(pts)} points")
    try:
        return PointCloud(pts, gt)
    except ValueError as exc:
        raise fileio.DataError(f"{path}: {exc}") from None


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    raw = fileio.read_json(args.spec)
    if not isinstance(raw, dict):
        raise UsageError(f"{args.spec}: scene spec must be a JSON object")
    raw = dict(raw)
    name = str(raw.pop("name", Path(args.spec).stem))
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = synth.SceneSpec.from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{args.spec}: invalid scene spec: {exc}") from None
    scene = synth.generate(spec)
    out = _out_dir(args)
    files = [fileio.write_xyz(out / f"{name}.xyz", scene.cloud.points),
             fileio.write_normals(out / f"{name}.normals", scene.cloud.gt_normals),
             fileio.write_mask(out / f"{name}.mask", scene.outlier_mask)]
    write_manifest(out, args, files, spec.to_dict(), spec.seed)
    print(f"{name}: {len(scene.cloud)} points, {int(scene.outlier_mask.sum())} outliers")
    return EXIT_OK


def cmd_estimate(args) -> int:
    config = _load_config(args)
    cloud = _read_cloud(args.cloud)
    workers = args.workers or os.cpu_count() or 1
    normals, diags = estimate_normals(cloud, config, index=build_index(cloud), workers=workers)
    out = _out_dir(args)
    stem = Path(args.cloud).stem
    nfile = fileio.write_normals(out / f"{stem}.normals", normals)
    keys = ["order_used", "fallback", "n_points", "condition", "effective_weights",
            "offset_max", "offset_mean"]
    dfile = fileio.write_csv(out / f"{stem}.diagnostics.csv", ["index"] + keys,
                             [[i] + [d[k] for k in keys] for i, d in enumerate(diags)])
    write_manifest(out, args, [nfile, dfile], config.to_dict())
    n_fb = sum(1 for d in diags if d["fallback"])
    print(f"{len(normals)} normals written, {n_fb} fallbacks")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = fileio.read_normals(args.pred)
    gt = fileio.read_normals(args.gt)
    if len(pred) != len(gt):
        raise fileio.DataError(f"{args.pred} has {len(pred)} normals, {args.gt} has {len(gt)}")
    if len(pred) == 0:
        raise fileio.DataError(f"{args.pred}: no normals")
    try:
        err = angle_error(pred, gt)
    except ValueError as exc:
        raise fileio.DataError(str(exc)) from None
    err = np.atleast_1d(err)
    curve = auc_curve(err)
    out = _out_dir(args)
    files = [fileio.write_csv(out / "auc.csv", ["threshold_deg", "fraction"],
                              [[float(t), float(f)] for t, f in zip(curve.thresholds, curve.fractions)])]
    if args.points is not None:
        pts = fileio.read_xyz(args.points)
        if len(pts) != len(err):
            raise fileio.DataError(f"{args.points}: {len(pts)} points for {len(err)} normals")
        files.append(error_map_export(pts, err, out / "error_map.ply"))
    value = rmse(err)
    write_manifest(out, args, files, {"rmse": value, "auc": curve.area()})
    print(f"RMSE {value:.6f}")
    print(f"AUC {curve.area():.6f}")
    return EXIT_OK


def _suite_scenes(suite: dict):
    if "scenes" in suite:
        scenes = []
        for i, s in enumerate(suite["scenes"]):
            s = dict(s)
            name = str(s.pop("name", f"scene{i:02d}"))
            scenes.append(experiments.NamedScene(name, synth.SceneSpec.from_dict(s)))
        return scenes
    gen = dict(suite.get("generator", {"kind": "outlier_curvature"}))
    kind = gen.pop("kind", "outlier_curvature")
    if kind == "outlier_curvature":
        return experiments.outlier_curvature_suite(**gen)
    if kind == "mixed_curvature":
        return [experiments.mixed_curvature_scene(**gen)]
    raise ValueError(f"unknown scene generator {kind!r}")


def _suite_configs(suite: dict) -> dict:
    if "configs" in suite:
        return {str(k): EstimatorConfig.from_dict(v, model_loader=micronet.load_model)
                for k, v in suite["configs"].items()}
    grid = dict(suite.get("grid", {"kind": "offset"}))
    kind = grid.pop("kind", "offset")
    if "scales" in grid:
        grid["scales"] = tuple(grid["scales"])
    if "thresholds" in grid:
        grid["thresholds"] = tuple(grid["thresholds"])
    if "orders" in grid:
        grid["orders"] = tuple(grid["orders"])
    if kind == "offset":
        return experiments.offset_grid(**grid)
    if kind == "truncation":
        return experiments.truncation_grid(**grid)
    raise ValueError(f"unknown config grid {kind!r}")


def cmd_ablate(args) -> int:
    suite = fileio.read_json(args.suite)
    if not isinstance(suite, dict):
        raise UsageError(f"{args.suite}: suite must be a JSON object")
    try:
        scenes = _suite_scenes(suite)
        configs = _suite_configs(suite)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{args.suite}: invalid suite: {exc}") from None
    queries = suite.get("queries_per_scene", 100)
    query_seed = int(suite.get("query_seed", 0))
    prepared = experiments.prepare_scenes(scenes, queries, query_seed)
    rows = experiments.run_ablation(prepared, configs, args.workers or 1)
    out = _out_dir(args)
    table = fileio.write_csv(out / "ablation.csv", ["config", "scene", "rmse_deg", "n_queries"], rows)
    resolved = {"scenes": [{"name": s.name, **s.spec.to_dict()} for s in scenes],
                "configs": {k: c.to_dict() for k, c in configs.items()},
                "queries_per_scene": queries, "query_seed": query_seed}
    write_manifest(out, args, [table], resolved, query_seed)
    for cname, value in experiments.average_by_config(rows).items():
        print(f"{cname:28s} {value:8.4f}")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    config = _load_config(args)
    cloud = _read_cloud(args.cloud)
    if not 0 <= args.query < len(cloud):
        raise UsageError(f"query index {args.query} out of range for {len(cloud)} points")
    prepared = prepare_query(cloud, build_index(cloud), args.query, config.scales)
    w, off, _ = fit_prepared(prepared, config, config.order)
    problem = FitProblem(prepared.fit_coords, config.order, w, off)
    rep = sensitivity_report(problem)
    an = rep.dnormal_dw
    fd = np.array([finite_difference_dnormal(problem, i) for i in range(len(problem))])
    fd_norm = np.linalg.norm(fd, axis=1)
    denom = np.maximum(fd_norm, FD_FLOOR * fd_norm.max()) if fd_norm.max() > 0 else np.ones_like(fd_norm)
    agreement = np.linalg.norm(fd - an, axis=1) / denom
    src = prepared.patch.source.indices[: prepared.fit_size]
    mags = rep.magnitudes
    rank = np.empty(len(mags), dtype=int)
    rank[np.lexsort((np.arange(len(mags)), -mags))] = np.arange(len(mags))
    rows = [[int(src[i]), int(rank[i]), float(problem.weights[i]), float(rep.residuals[i]),
             float(mags[i]), float(fd_norm[i]), float(agreement[i])] for i in range(len(mags))]
    out = _out_dir(args)
    table = fileio.write_csv(
        out / "sensitivity.csv",
        ["point_index", "rank", "weight", "residual", "dnormal_dw_norm", "fd_dnormal_dw_norm",
         "fd_rel_error"], rows)
    write_manifest(out, args, [table], config.to_dict())
    top = int(np.argmax(mags))
    print(f"most influential point {int(src[top])} (|dn/dw| = {mags[top]:.3e}); "
          f"max FD relative error {agreement.max():.2e}")
    return EXIT_OK


def _dataset_cloud(dataset: Path):
    xyz = sorted(dataset.glob("*.xyz"))
    if len(xyz) != 1:
        raise fileio.DataError(f"{dataset}: expected exactly one .xyz scene, found {len(xyz)}")
    stem = xyz[0].with_suffix("")
    cloud = _read_cloud(xyz[0], stem.with_suffix(".normals"))
    mask_path = stem.with_suffix(".mask")
    mask = fileio.read_mask(mask_path) if mask_path.exists() else np.zeros(len(cloud), bool)
    if len(mask) != len(cloud):
        raise fileio.DataError(f"{mask_path}: {len(mask)} entries for {len(cloud)} points")
    return cloud, mask


def cmd_train_toy(args) -> int:
    cloud, mask = _dataset_cloud(Path(args.dataset))
    scales = tuple(args.scales)
    inliers = np.flatnonzero(~mask)
    if len(inliers) < 1 or len(cloud) < scales[0]:
        raise fileio.DataError(f"{args.dataset}: too few points for scales {scales}")
    rng = np.random.default_rng(args.seed)
    queries = np.sort(rng.choice(inliers, size=min(args.patches, len(inliers)), replace=False))
    try:
        model = micronet.FitNet(scales, args.order, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    samples = synth.cloud_patches(cloud, queries, scales)
    result = micronet.train_toy(model, samples, steps=args.steps, lr=args.lr,
                                batch_size=args.batch_size, seed=args.seed)
    out = _out_dir(args)
    files = [micronet.save_model(result.model, out / "model.jnet"),
             fileio.write_csv(out / "loss.csv", ["step", "sin_loss", "total_loss"], result.curve)]
    cfg = {"model": result.model.config(), "optimizer": result.optimizer,
           "patches": int(len(queries))}
    write_manifest(out, args, files, cfg, args.seed)
    first = np.mean([c[1] for c in result.curve[:20]])
    last = np.mean([c[1] for c in result.curve[-20:]])
    print(f"sin loss {first:.4f} -> {last:.4f} over {args.steps} steps "
          f"({result.skipped} singular patches skipped)")
    return EXIT_OK


def cmd_rerun(args) -> int:
    manifest = fileio.read_json(args.manifest)
    try:
        command, saved = manifest["command"], dict(manifest["args"])
        expected = dict(manifest["outputs"])
    except (KeyError, TypeError):
        raise UsageError(f"{args.manifest}: not a run manifest") from None
    if command == "rerun":
        raise UsageError("cannot rerun a rerun manifest")
    if args.out_dir is not None:
        saved["out_dir"] = str(Path(args.out_dir).resolve())
    sub = build_parser().commands.get(command)
    if sub is None:
        raise UsageError(f"{args.manifest}: unknown command {command!r}")
    replay = argparse.Namespace(**{**vars(sub.parse_args(_argv_for(sub, saved))), "command": command})
    code = replay.func(replay)
    if code != EXIT_OK:
        return code
    out = Path(saved["out_dir"])
    bad = [n for n, h in expected.items() if not (out / n).exists() or fileio.sha256(out / n) != h]
    for n in expected:
        print(f"{n}: {'MISMATCH' if n in bad else 'identical'}")
    return EXIT_NUMERIC if bad else EXIT_OK


def _argv_for(sub: argparse.ArgumentParser, saved: dict) -> list:
    """Rebuild an argument vector for ``sub`` from a saved namespace dict."""
    argv = []
    for action in sub._actions:  # noqa: SLF001
        if action.dest not in saved:
            continue
        value = saved[action.dest]
        if not action.option_strings:
            argv.append(str(value))
            continue
        if value is None:
            continue
        flag = action.option_strings[-1]
        if isinstance(value, list):
            argv += [flag] + [str(v) for v in value]
        else:
            argv += [flag, str(value)]
    return argv


# -- parser --------------------------------------------------------------------


def _add_config_args(p):
    p.add_argument("--config", type=Path, help="estimator config JSON")
    p.add_argument("--order", type=int, help="jet order (overrides the config)")
    p.add_argument("--scales", type=int, nargs="+", help="neighbourhood sizes, largest first")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jetnormal", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"jetnormal {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene from a JSON spec")
    p.add_argument("spec", type=Path)
    p.add_argument("--seed", type=int, help="override the scene file's seed")
    p.add_argument("-o", "--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", help="estimate a normal for every point of an .xyz file")
    p.add_argument("cloud", type=Path)
    _add_config_args(p)
    p.add_argument("--workers", type=int, help="threads (default: all cores)")
    p.add_argument("-o", "--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="RMSE and AUC curve of predicted vs true normals")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--points", type=Path, help=".xyz file; also writes a coloured error-map PLY")
    p.add_argument("-o", "--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run a config x scene grid and tabulate RMSE")
    p.add_argument("suite", type=Path)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-o", "--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sensitivity", help="per-point influence of the weights on one normal")
    p.add_argument("cloud", type=Path)
    p.add_argument("query", type=int)
    _add_config_args(p)
    p.add_argument("-o", "--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("train-toy", help="train the weight/offset network on a synthetic scene")
    p.add_argument("dataset", type=Path, help="directory written by 'jetnormal synth'")
    p.add_argument("--scales", type=int, nargs="+", default=list(micronet.DEFAULT_SCALES))
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--patches", type=int, default=200)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=micronet.DEFAULT_LR)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("rerun", help="replay a manifest and check outputs are byte-identical")
    p.add_argument("manifest", type=Path)
    p.add_argument("-o", "--out-dir", type=Path, help="write the replay here instead")
    p.set_defaults(func=cmd_rerun)
    parser.commands = dict(sub.choices)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"jetnormal {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except fileio.DataError as exc:
        print(f"jetnormal {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SingularFitError, np.linalg.LinAlgError, micronet.TrainingDivergedError,
            FloatingPointError) as exc:
        print(f"jetnormal {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
