"""Acceptance gate: twelve numbered end-to-end checks.

One test per criterion, covering metric exactness, rasterizer equivalence,
gradient correctness, likelihood decomposition, pose recovery, occlusion
robustness trends, ablation directions, occluder localization, loss-landscape
shape and CLI determinism.  Each test prints a single verdict line with the
measured margins (run with ``pytest -s`` to see them as they happen).

The heavy checks share one frozen world and four 200-scene sets through
module-scoped fixtures, so the whole module runs in a few minutes.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from meshpose.cli import main as cli_main
from meshpose.geometry import (CameraIntrinsics, CameraPose,
                               axis_angle_rotation, geodesic_error,
                               rotation_from_angles)
from meshpose.harness import (HarnessConfig, derive_seed, estimate_scene,
                              evaluate, generate_scene_set,
                              loss_landscape_sweep, make_world, run_ablation)
from meshpose.inference import RobustConfig, infer_occlusion_map, \
    robust_log_likelihood
from meshpose.model import (BackgroundModel, FeatureMap, NeuralMesh,
                            background_score_map, foreground_score_map,
                            l2_normalize_rows, log_likelihood,
                            render_feature_map)
from meshpose.mesh import make_box_mesh
from meshpose.rasterizer import rasterize_rotation
from meshpose.training import LinearPatchExtractor, total_loss_and_weight_grad

from oracles import brute_force_rasterize, random_triangle_soup

LEVELS = ("L0", "L1", "L2", "L3")
PI6 = math.pi / 6.0
PI18 = math.pi / 18.0


def _verdict(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# shared heavy fixtures: one frozen world, 200 scenes per occlusion level,
# and the 144-init estimates that criteria 5, 6, 7 and 9 all read from.


@pytest.fixture(scope="module")
def world():
    return make_world(derive_seed(11, 7, 0))


@pytest.fixture(scope="module")
def scene_sets(world):
    return {lv: generate_scene_set(world, [lv], 200, 0.1, 400 + i)
            for i, lv in enumerate(LEVELS)}


def _run(scenes, world, cfg):
    estimates = [estimate_scene(s, world.models, world.bg, cfg, world.intr)
                 for s in scenes]
    return evaluate(scenes, estimates)


@pytest.fixture(scope="module")
def l0_timed(world, scene_sets):
    t0 = time.perf_counter()
    report = _run(scene_sets["L0"], world, RobustConfig())
    return report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def reports(world, scene_sets, l0_timed):
    out = {"L0": l0_timed[0]}
    for lv in LEVELS[1:]:
        out[lv] = _run(scene_sets[lv], world, RobustConfig())
    return out


# ---------------------------------------------------------------------------


def test_criterion_01_rotation_metric_exactness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        r = rotation_from_angles(*rng.uniform(-math.pi, math.pi, size=3))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        phi = rng.uniform(0.0, math.pi)
        worst = max(worst,
                    geodesic_error(r, r),
                    abs(geodesic_error(axis_angle_rotation(axis, phi) @ r, r)
                        - phi))
    elapsed = time.perf_counter() - t0
    _verdict(1, "rotation metric exactness",
             worst < 1e-9 and elapsed < 1.0,
             f"max deviation {worst:.2e} < 1e-9 over 1000 triples, "
             f"{elapsed:.2f}s < 1s")


def test_criterion_02_rasterizer_oracle_equivalence():
    rng = np.random.default_rng(31)
    intr = CameraIntrinsics(focal=480.0, cx=256.0, cy=256.0,
                            width=512, height=512)
    t0 = time.perf_counter()
    exact = True
    for _ in range(100):
        mesh = random_triangle_soup(rng, int(rng.integers(1, 51)))
        rot = rotation_from_angles(*rng.uniform(-math.pi, math.pi, size=3))
        frags = rasterize_rotation(mesh, rot, 6.0, intr, 64, 64)
        face, bary, depth = brute_force_rasterize(mesh, rot, 6.0, intr, 64, 64)
        exact = exact and np.array_equal(frags.face, face) \
            and np.array_equal(frags.bary, bary) \
            and np.array_equal(frags.depth, depth)
    elapsed = time.perf_counter() - t0
    _verdict(2, "rasterizer equals brute-force reference",
             exact and elapsed < 30.0,
             f"pixel-exact on 100 meshes (<=50 faces, 64x64), "
             f"{elapsed:.1f}s < 30s")


def test_criterion_03_weight_gradient_correctness():
    intr = CameraIntrinsics(focal=64.0, cx=16.0, cy=16.0, width=32, height=32)
    mesh = make_box_mesh([-0.6, -0.4, -0.5], [0.6, 0.4, 0.5])
    pose = CameraPose(0.3, 0.2, 0.1, 3.0)
    h = 1e-6
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        model = NeuralMesh(mesh, l2_normalize_rows(rng.normal(size=(8, 3))))
        bg = BackgroundModel(
            l2_normalize_rows(rng.normal(size=(1, 3)))[0])
        image = rng.normal(size=(16, 16))
        ext = LinearPatchExtractor(rng.normal(size=(3, 4)), patch_size=2,
                                   channels=1, normalized=bool(i % 2))
        _, grad = total_loss_and_weight_grad(ext, image, model, pose, bg,
                                             intr, weights=(1.0, 1.0, 1.0))
        fd = np.zeros_like(grad)
        for a in range(grad.shape[0]):
            for b in range(grad.shape[1]):
                keep = ext.weight[a, b]
                ext.weight[a, b] = keep + h
                up, _ = total_loss_and_weight_grad(
                    ext, image, model, pose, bg, intr, weights=(1.0, 1.0, 1.0))
                ext.weight[a, b] = keep - h
                dn, _ = total_loss_and_weight_grad(
                    ext, image, model, pose, bg, intr, weights=(1.0, 1.0, 1.0))
                ext.weight[a, b] = keep
                fd[a, b] = (up - dn) / (2.0 * h)
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-300)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    _verdict(3, "analytic weight gradient matches central differences",
             worst < 1e-4 and elapsed < 10.0,
             f"max relative error {worst:.2e} < 1e-4 on 20 instances, "
             f"{elapsed:.1f}s < 10s")


def test_criterion_04_likelihood_decomposition():
    rng = np.random.default_rng(77)
    intr = CameraIntrinsics(focal=48.0, cx=6.0, cy=6.0, width=12, height=12)
    worst = 0.0
    zmaps_exact = True
    covered_instances = 0
    for _ in range(100):
        mesh = random_triangle_soup(rng, int(rng.integers(2, 9)), spread=0.6)
        model = NeuralMesh(mesh, l2_normalize_rows(
            rng.normal(size=(mesh.vertex_count, 5))))
        bg = BackgroundModel(l2_normalize_rows(rng.normal(size=(1, 5)))[0])
        pose = CameraPose(rng.uniform(0.0, 2.0 * math.pi),
                          rng.uniform(-math.pi / 9, 2 * math.pi / 9),
                          rng.uniform(-math.pi / 6, math.pi / 6), 6.0)
        f = FeatureMap(rng.normal(size=(12, 12, 5)))

        ll_off, _ = robust_log_likelihood(f, model, pose, bg,
                                          RobustConfig(robust=False), intr)
        ll_ref = log_likelihood(f, model, pose, bg, intr, mode="pixel")
        worst = max(worst, abs(ll_off - ll_ref))

        _, occ = robust_log_likelihood(f, model, pose, bg,
                                       RobustConfig(occlusion_prior=0.5), intr)
        render = render_feature_map(model, pose, intr, 12, 12)
        fg = foreground_score_map(f, render, model)
        bgm = background_score_map(f, bg)
        expected = np.zeros((12, 12), dtype=np.uint8)
        expected[render.fg_mask & (fg >= bgm)] = 1
        expected[render.fg_mask & (fg < bgm)] = 2
        zmaps_exact = zmaps_exact and np.array_equal(occ.labels, expected)
        covered_instances += bool(render.fg_mask.any())
    _verdict(4, "robust likelihood decomposes over per-pixel argmax",
             worst <= 1e-6 and zmaps_exact and covered_instances >= 90,
             f"off-switch deviation {worst:.2e} <= 1e-6, z-maps exact, "
             f"{covered_instances}/100 instances with coverage")


def test_criterion_05_pose_recovery_unoccluded(l0_timed):
    report, elapsed = l0_timed
    acc = report.accuracy(PI18)
    med = report.median_deg()
    _verdict(5, "pose recovery on 200 clean scenes",
             acc >= 0.95 and med < 2.0 and elapsed < 300.0,
             f"acc_pi18={acc:.3f} >= 0.95, median={med:.2f}deg < 2, "
             f"{elapsed:.0f}s < 300s single-threaded")


def test_criterion_06_occlusion_robustness_trend(reports):
    meds = [reports[lv].median_deg() for lv in LEVELS]
    acc_l2 = reports["L2"].accuracy(PI6)
    monotone = all(b >= a - 1e-9 for a, b in zip(meds, meds[1:]))
    _verdict(6, "median error grows with occlusion, L2 stays usable",
             monotone and acc_l2 >= 0.55,
             "medians " + "/".join(f"{m:.2f}" for m in meds)
             + f"deg non-decreasing, L2 acc_pi6={acc_l2:.3f} >= 0.55")


def test_criterion_07_outlier_model_ablation(world, scene_sets, reports):
    acc_robust = (reports["L2"].accuracy(PI6)
                  + reports["L3"].accuracy(PI6)) / 2.0
    plain = _run(scene_sets["L2"] + scene_sets["L3"], world,
                 RobustConfig(robust=False))
    acc_plain = plain.accuracy(PI6)
    gap = acc_robust - acc_plain
    _verdict(7, "outlier handling beats the plain likelihood",
             gap >= 0.03,
             f"robust acc_pi6={acc_robust:.3f} vs plain {acc_plain:.3f} "
             f"on paired L2+L3, gap {100 * gap:+.1f}pts >= 3")


def test_criterion_08_contrastive_ablation():
    cfg = HarnessConfig(seed=11, count=50, levels=("L0",),
                        train_count=40, train_epochs=80)
    arms = run_ablation("no_contrastive", cfg)
    acc_full = arms["full"].accuracy(PI6)
    acc_ml = arms["ml_only"].accuracy(PI6)
    gap = acc_full - acc_ml
    _verdict(8, "contrastive training beats reconstruction-only",
             gap >= 0.05,
             f"image-mode L0 acc_pi6 full={acc_full:.3f} vs "
             f"ml-only={acc_ml:.3f}, gap {100 * gap:+.1f}pts >= 5")


def test_criterion_09_init_count_trend(world, scene_sets, reports):
    a144 = reports["L0"].accuracy(PI6)
    a36 = _run(scene_sets["L0"], world,
               RobustConfig(init_grid=(12, 3, 1))).accuracy(PI6)
    a1 = _run(scene_sets["L0"], world,
              RobustConfig(init_grid=(1, 1, 1))).accuracy(PI6)
    _verdict(9, "more initial poses never hurt, one is far worse",
             a144 >= a36 >= a1 and a1 <= a144 - 0.15,
             f"acc_pi6 144/36/1 = {a144:.3f}/{a36:.3f}/{a1:.3f}, "
             f"margin {100 * (a144 - a1):.0f}pts >= 15")


def test_criterion_10_occluder_localization(world, scene_sets):
    model = world.models["s0"]
    cfg = RobustConfig()
    ious = []
    for s in scene_sets["L2"][:100]:
        render = render_feature_map(model, s.gt_pose, world.intr,
                                    *world.lattice)
        occ = infer_occlusion_map(s.features, render, model, world.bg, cfg)
        gt = s.occluder_mask & s.fg_mask
        union = (occ.occluded | gt).sum()
        ious.append((occ.occluded & gt).sum() / union if union else 1.0)
    mean_iou = float(np.mean(ious))
    _verdict(10, "inferred occlusion overlaps the true occluder",
             mean_iou >= 0.5,
             f"mean IoU {mean_iou:.3f} >= 0.5 over 100 L2 scenes "
             f"(min {np.min(ious):.3f})")


def test_criterion_11_landscape_global_minimum(world, scene_sets):
    model = world.models["s0"]
    cfg = RobustConfig()
    hits = 0
    for s in scene_sets["L0"][:100]:
        values, nll = loss_landscape_sweep(s.features, model, world.bg,
                                           s.gt_pose, "azimuth", 72, math.pi,
                                           cfg, world.intr)
        k = int(np.argmin(nll))
        step = values[1] - values[0]
        hits += abs(values[k] - s.gt_pose.azimuth) <= step + 1e-9
    _verdict(11, "azimuth sweep has its global minimum at the truth",
             hits >= 90,
             f"{hits}/100 scenes within one step of ground truth (>=90)")


def _tree_bytes(root: Path, skip=()) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip}


def test_criterion_12_cli_determinism(tmp_path):
    gen_flags = ["--seed", "5", "--count", "3", "--levels", "L0,L2",
                 "--feature-dim", "16", "--vertex-target", "150",
                 "--lattice", "16", "--patch-size", "4", "--focal", "120"]
    est_flags = ["--inits", "6", "--max-iterations", "25", "--dump-occlusion"]
    scenes, est, ev = (tmp_path / n for n in ("scenes", "est", "eval"))

    # Rerunning each stage with the identical config must reproduce every
    # output byte, resolved_config.json included.
    stages = [
        ("gen", ["gen", "--out", str(scenes)] + gen_flags, scenes),
        ("estimate", ["estimate", "--scenes", str(scenes), "--out", str(est)]
         + est_flags, est),
        ("eval", ["eval", "--scenes", str(scenes), "--estimates", str(est),
                  "--out", str(ev)], ev),
    ]
    identical = True
    for _, argv, out_dir in stages:
        assert cli_main(argv) == 0
        first = _tree_bytes(out_dir)
        assert cli_main(argv) == 0
        identical = identical and _tree_bytes(out_dir) == first

    # A worker pool must not change anything but the recorded jobs setting.
    jobs_equal = True
    for argv, out_dir, ref_dir in (
            (["gen", "--out", str(tmp_path / "g8"), "--jobs", "8"]
             + gen_flags, tmp_path / "g8", scenes),
            (["estimate", "--scenes", str(scenes), "--out",
              str(tmp_path / "e8"), "--jobs", "8"] + est_flags,
             tmp_path / "e8", est)):
        assert cli_main(argv) == 0
        skip = ("resolved_config.json",)   # records out path and jobs count
        jobs_equal = jobs_equal and (
            _tree_bytes(out_dir, skip) == _tree_bytes(ref_dir, skip))

    _verdict(12, "pipeline reruns are byte-identical",
             identical and jobs_equal,
             "gen/estimate/eval reruns identical, --jobs 8 matches "
             "single-process output")
