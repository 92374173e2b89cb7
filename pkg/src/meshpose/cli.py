"""Command-line interface.

Subcommands: gen, train, estimate, eval, landscape, ablate.  Every run
takes an optional JSON config file plus flat ``--key value`` overrides
(command line wins), writes the merged settings to resolved_config.json in
its output directory, and is bit-reproducible given the same inputs --
including under ``--jobs N``, which fans scene work out to worker
processes but writes results in scene order.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import functools
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from .errors import NumericError
from .geometry import CameraPose
from .harness import (
    ABLATION_SUITES,
    GeneratorWorld,
    HarnessConfig,
    derive_seed,
    estimate_scene,
    evaluate,
    generate_scene,
    load_scene_set,
    load_world,
    loss_landscape_sweep,
    make_world,
    run_ablation,
    save_scene_set,
    save_world,
)
from .inference import RobustConfig, initial_grid_for_count
from .model import load_model, save_model
from .training import (
    TrainConfig,
    TrainSample,
    load_extractor,
    save_extractor,
    train,
    write_loss_trace,
)
from . import plots, tensorio

log = logging.getLogger("meshpose")

_REQUIRED = object()


class UsageError(Exception):
    """Bad arguments, bad config, or missing inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are 1
        raise UsageError(message)


GEN_DEFAULTS = {
    "out": _REQUIRED,
    "seed": 7,
    "count": 50,
    "levels": "L0,L1,L2,L3",
    "noise_sigma": 0.1,
    "mode": "features",
    "subtypes": 1,
    "feature_dim": 64,
    "vertex_target": 1200,
    "lattice": 64,
    "patch_size": 8,
    "focal": 480.0,
    "distance": 6.0,
    "feature_jitter": 0.15,
    "jobs": 1,
}

TRAIN_DEFAULTS = {
    "scenes": _REQUIRED,
    "out": _REQUIRED,
    "world": None,
    "epochs": 200,
    "lr": 0.05,
    "momentum": 0.9,
    "batch_size": 8,
    "feature_dim": 64,
    "seed": 0,
    "w_ml": 1.0,
    # Pair-averaged contrastive terms are O(1) while the reconstruction term
    # sums over pixels; these defaults put them on the same footing.
    "w_feat": 200.0,
    "w_back": 200.0,
    "no_contrastive": False,
}

ESTIMATE_DEFAULTS = {
    "scenes": _REQUIRED,
    "out": _REQUIRED,
    "world": None,
    "models": None,
    "inits": 144,
    "no_outlier": False,
    "occlusion_prior": 0.5,
    "grad_mode": "fd",
    "step_size": 0.05,
    "max_iterations": 300,
    "tol": 1e-6,
    "dump_occlusion": False,
    "jobs": 1,
}

EVAL_DEFAULTS = {
    "scenes": _REQUIRED,
    "estimates": _REQUIRED,
    "out": _REQUIRED,
}

LANDSCAPE_DEFAULTS = {
    "scenes": _REQUIRED,
    "out": _REQUIRED,
    "world": None,
    "scene_index": 0,
    "params": "azimuth,elevation,theta",
    "steps": 73,
    "span": math.pi,
    "occlusion_prior": 0.5,
    "no_outlier": False,
}

ABLATE_DEFAULTS = {
    "suite": _REQUIRED,
    "out": _REQUIRED,
    "seed": 0,
    "count": 25,
    "levels": None,   # suite-specific default
    "noise_sigma": 0.1,
    "subtypes": 1,
    "feature_dim": 64,
    "vertex_target": 1200,
    "lattice": 64,
    "patch_size": 8,
    "feature_jitter": 0.15,
    "train_count": 40,
    "train_epochs": 80,
    "inits": 144,
}

_SUITE_LEVELS = {
    "no_outlier": "L2,L3",
    "no_contrastive": "L0",
    "init_counts": "L0",
    "unseen_pose": "L0",
}


def _add_flags(parser: _Parser, defaults: dict) -> None:
    parser.add_argument("--config", default=None,
                        help="JSON file with defaults for any --key")
    for key, default in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, dest=key, action="store_const",
                                const=True, default=None)
        elif isinstance(default, int) and default is not _REQUIRED:
            parser.add_argument(flag, dest=key, type=int, default=None)
        elif isinstance(default, float):
            parser.add_argument(flag, dest=key, type=float, default=None)
        else:
            parser.add_argument(flag, dest=key, type=str, default=None)


def _resolve(defaults: dict, args: argparse.Namespace) -> dict:
    cfg = dict(defaults)
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}")
        unknown = sorted(set(data) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(data)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    missing = sorted(k for k, v in cfg.items() if v is _REQUIRED)
    if missing:
        raise UsageError(f"missing required settings: {', '.join(missing)}")
    return cfg


def _write_resolved(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    clean = {k: (v if not isinstance(v, tuple) else list(v))
             for k, v in cfg.items()}
    with open(out / "resolved_config.json", "w") as fh:
        json.dump(clean, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _levels_tuple(levels) -> tuple[str, ...]:
    if isinstance(levels, str):
        parts = tuple(p.strip() for p in levels.split(",") if p.strip())
    else:
        parts = tuple(levels)
    if not parts:
        raise UsageError("no occlusion levels given")
    return parts


def _parallel_map(fn, items, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        chunk = max(1, len(items) // (jobs * 4))
        return list(pool.map(fn, items, chunksize=chunk))


# ---------------------------------------------------------------------------
# gen


def _gen_one(task, world: GeneratorWorld, noise_sigma: float):
    index, level, seed = task
    return generate_scene(world, level, noise_sigma, seed,
                          scene_id=f"scene_{index:05d}_{level}")


def cmd_gen(args) -> int:
    cfg = _resolve(GEN_DEFAULTS, args)
    out = Path(cfg["out"])
    levels = _levels_tuple(cfg["levels"])
    for level in levels:
        if level not in ("L0", "L1", "L2", "L3"):
            raise UsageError(f"unknown occlusion level {level!r}")
    cfg["levels"] = ",".join(levels)
    _write_resolved(out, cfg)
    world = make_world(
        derive_seed(int(cfg["seed"]), 7, 0), n_subtypes=int(cfg["subtypes"]),
        feature_dim=int(cfg["feature_dim"]),
        vertex_target=int(cfg["vertex_target"]), lattice=int(cfg["lattice"]),
        patch_size=int(cfg["patch_size"]), focal=float(cfg["focal"]),
        distance=float(cfg["distance"]),
        feature_jitter=float(cfg["feature_jitter"]), mode=cfg["mode"])
    save_world(out / "world", world)
    tasks = []
    index = 0
    for level in levels:
        for _ in range(int(cfg["count"])):
            tasks.append((index, level, derive_seed(int(cfg["seed"]), 1, index)))
            index += 1
    scenes = _parallel_map(
        functools.partial(_gen_one, world=world,
                          noise_sigma=float(cfg["noise_sigma"])),
        tasks, int(cfg["jobs"]))
    save_scene_set(out, scenes, world, int(cfg["seed"]))
    log.info("generated %d scenes -> %s", len(scenes), out)
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _resolve(TRAIN_DEFAULTS, args)
    scenes_dir = Path(cfg["scenes"])
    out = Path(cfg["out"])
    world_dir = Path(cfg["world"]) if cfg["world"] else scenes_dir / "world"
    if not world_dir.exists():
        raise UsageError(f"world directory not found: {world_dir}")
    _write_resolved(out, cfg)
    scenes, manifest = load_scene_set(scenes_dir)
    world = load_world(world_dir)
    samples = []
    for s in scenes:
        if s.image is not None:
            samples.append(TrainSample(pose=s.gt_pose, subtype=s.subtype,
                                       image=s.image))
        else:
            samples.append(TrainSample(pose=s.gt_pose, subtype=s.subtype,
                                       features=s.features))
    meshes = {k: m.mesh for k, m in world.models.items()}
    weights = (float(cfg["w_ml"]), float(cfg["w_feat"]), float(cfg["w_back"]))
    if cfg["no_contrastive"]:
        weights = (weights[0], 0.0, 0.0)
    tcfg = TrainConfig(
        epochs=int(cfg["epochs"]), lr=float(cfg["lr"]),
        momentum=float(cfg["momentum"]), batch_size=int(cfg["batch_size"]),
        seed=int(cfg["seed"]), feature_dim=int(cfg["feature_dim"]),
        patch_size=world.patch_size, weights=weights)
    result = train(samples, meshes, tcfg, world.intr)
    for label, model in result.models.items():
        save_model(out / "models" / label, model, result.bg)
    if result.extractor is not None:
        save_extractor(out / "extractor", result.extractor)
    write_loss_trace(out / "loss_trace.csv", result.trace)
    plots.save_trace_figure(result.trace, out / "loss_trace.png")
    log.info("trained %d epochs on %d samples -> %s",
             tcfg.epochs, len(samples), out)
    return 0


# ---------------------------------------------------------------------------
# estimate


def _load_models_for_estimation(cfg, scenes_dir: Path):
    world_dir = Path(cfg["world"]) if cfg["world"] else scenes_dir / "world"
    if not world_dir.exists():
        raise UsageError(f"world directory not found: {world_dir}")
    world = load_world(world_dir)
    models = world.models
    bg = world.bg
    extractor = None
    if cfg["models"]:
        mdir = Path(cfg["models"])
        model_root = mdir / "models" if (mdir / "models").exists() else mdir
        loaded = {}
        for sub in sorted(p for p in model_root.iterdir() if p.is_dir()):
            if (sub / "model.json").exists():
                model, bg = load_model(sub)
                loaded[model.label] = model
        if not loaded:
            raise UsageError(f"no models found under {mdir}")
        models = loaded
        if (mdir / "extractor" / "extractor.json").exists():
            extractor = load_extractor(mdir / "extractor")
    return world, models, bg, extractor


def _estimate_one(scene, models, bg, rcfg, intr, extractor):
    est = estimate_scene(scene, models, bg, rcfg, intr, extractor)
    record = {
        "scene_id": scene.scene_id,
        "subtype": est.subtype,
        "azimuth": est.pose.azimuth,
        "elevation": est.pose.elevation,
        "theta": est.pose.theta,
        "loss": est.loss,
        "iterations": est.iterations,
        "init_index": est.init_index,
    }
    return record, est.occlusion.to_graymap() if est.occlusion else None


def cmd_estimate(args) -> int:
    cfg = _resolve(ESTIMATE_DEFAULTS, args)
    scenes_dir = Path(cfg["scenes"])
    if not scenes_dir.exists():
        raise UsageError(f"scenes directory not found: {scenes_dir}")
    out = Path(cfg["out"])
    _write_resolved(out, cfg)
    scenes, _ = load_scene_set(scenes_dir)
    world, models, bg, extractor = _load_models_for_estimation(cfg, scenes_dir)
    if scenes and scenes[0].image is not None and extractor is None:
        raise UsageError("image scenes need --models with a trained extractor")
    rcfg = RobustConfig(
        occlusion_prior=float(cfg["occlusion_prior"]),
        robust=not cfg["no_outlier"],
        grad_mode=cfg["grad_mode"],
        step_size=float(cfg["step_size"]),
        max_iterations=int(cfg["max_iterations"]),
        tol=float(cfg["tol"]),
        init_grid=initial_grid_for_count(int(cfg["inits"])))
    results = _parallel_map(
        functools.partial(_estimate_one, models=models, bg=bg, rcfg=rcfg,
                          intr=world.intr, extractor=extractor),
        scenes, int(cfg["jobs"]))
    records = [rec for rec, _ in results]
    payload = {"scenes": str(scenes_dir), "count": len(records),
               "records": records}
    with open(out / "estimates.json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if cfg["dump_occlusion"]:
        occ_dir = out / "occlusion"
        occ_dir.mkdir(exist_ok=True)
        for (rec, gray), scene in zip(results, scenes):
            if gray is not None:
                tensorio.write_pgm(occ_dir / f"{scene.scene_id}.pgm", gray)
    log.info("estimated %d scenes -> %s", len(records), out)
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = _resolve(EVAL_DEFAULTS, args)
    scenes_dir = Path(cfg["scenes"])
    est_path = Path(cfg["estimates"])
    if est_path.is_dir():
        est_path = est_path / "estimates.json"
    if not est_path.exists():
        raise UsageError(f"estimates file not found: {est_path}")
    out = Path(cfg["out"])
    _write_resolved(out, cfg)
    scenes, _ = load_scene_set(scenes_dir)
    with open(est_path) as fh:
        payload = json.load(fh)
    by_id = {rec["scene_id"]: rec for rec in payload["records"]}
    from .inference import PoseEstimate  # local import to keep cli deps slim

    estimates = []
    for scene in scenes:
        rec = by_id.get(scene.scene_id)
        if rec is None:
            raise UsageError(f"no estimate for scene {scene.scene_id}")
        pose = CameraPose(rec["azimuth"], rec["elevation"], rec["theta"],
                          scene.gt_pose.distance)
        estimates.append(PoseEstimate(
            pose=pose, loss=rec["loss"], iterations=rec["iterations"],
            init_index=rec["init_index"], subtype=rec["subtype"]))
    report = evaluate(scenes, estimates)
    report.to_csv(out / "report.csv")
    summary = report.summary()
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    plots.save_eval_figure(report, out / "report.png")
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------
# landscape


def cmd_landscape(args) -> int:
    cfg = _resolve(LANDSCAPE_DEFAULTS, args)
    scenes_dir = Path(cfg["scenes"])
    out = Path(cfg["out"])
    _write_resolved(out, cfg)
    scenes, _ = load_scene_set(scenes_dir)
    index = int(cfg["scene_index"])
    if not 0 <= index < len(scenes):
        raise UsageError(f"scene index {index} out of range (0..{len(scenes) - 1})")
    scene = scenes[index]
    if scene.features is None:
        raise UsageError("landscape sweeps need feature-mode scenes")
    world_dir = Path(cfg["world"]) if cfg["world"] else scenes_dir / "world"
    world = load_world(world_dir)
    model = world.models[scene.subtype]
    rcfg = RobustConfig(occlusion_prior=float(cfg["occlusion_prior"]),
                        robust=not cfg["no_outlier"])
    params = tuple(p.strip() for p in str(cfg["params"]).split(",") if p.strip())
    curves = {}
    for param in params:
        values, nll = loss_landscape_sweep(
            scene.features, model, world.bg, scene.gt_pose, param,
            int(cfg["steps"]), float(cfg["span"]), rcfg, world.intr)
        with open(out / f"landscape_{param}.csv", "w") as fh:
            fh.write("param_value,nll\n")
            for v, y in zip(values, nll):
                fh.write(f"{float(v)!r},{float(y)!r}\n")
        gt = {"azimuth": scene.gt_pose.azimuth,
              "elevation": scene.gt_pose.elevation,
              "theta": scene.gt_pose.theta}[param]
        curves[param] = (values, nll, gt)
    plots.save_landscape_figure(curves, out / "landscape.png")
    log.info("swept %s for %s -> %s", ",".join(params), scene.scene_id, out)
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    cfg = _resolve(ABLATE_DEFAULTS, args)
    suite = cfg["suite"]
    if suite not in ABLATION_SUITES:
        raise UsageError(f"unknown suite {suite!r}; choose from {ABLATION_SUITES}")
    out = Path(cfg["out"])
    levels = _levels_tuple(cfg["levels"] or _SUITE_LEVELS[suite])
    cfg["levels"] = ",".join(levels)
    _write_resolved(out, cfg)
    hcfg = HarnessConfig(
        seed=int(cfg["seed"]), count=int(cfg["count"]), levels=levels,
        noise_sigma=float(cfg["noise_sigma"]), subtypes=int(cfg["subtypes"]),
        feature_dim=int(cfg["feature_dim"]),
        vertex_target=int(cfg["vertex_target"]), lattice=int(cfg["lattice"]),
        patch_size=int(cfg["patch_size"]),
        feature_jitter=float(cfg["feature_jitter"]),
        train_count=int(cfg["train_count"]),
        train_epochs=int(cfg["train_epochs"]),
        robust=RobustConfig(init_grid=initial_grid_for_count(int(cfg["inits"]))))
    reports = run_ablation(suite, hcfg)
    comparison = {}
    for arm, report in reports.items():
        report.to_csv(out / f"{arm}_report.csv")
        comparison[arm] = report.summary()
    with open(out / "comparison.json", "w") as fh:
        json.dump(comparison, fh, sort_keys=True, indent=2)
        fh.write("\n")
    plots.save_eval_figure(reports, out / "ablation.png")
    print(json.dumps(comparison, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="meshpose",
                     description="Render-and-compare pose estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults, fn in (
            ("gen", GEN_DEFAULTS, cmd_gen),
            ("train", TRAIN_DEFAULTS, cmd_train),
            ("estimate", ESTIMATE_DEFAULTS, cmd_estimate),
            ("eval", EVAL_DEFAULTS, cmd_eval),
            ("landscape", LANDSCAPE_DEFAULTS, cmd_landscape),
            ("ablate", ABLATE_DEFAULTS, cmd_ablate)):
        p = sub.add_parser(name)
        _add_flags(p, defaults)
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
