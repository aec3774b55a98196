"""Acceptance suite: one test per criterion, each printing a PASS line.

The desk-scale experiments (criteria 4, 5, 8) share one synthesized dataset
and reuse training runs across criteria; they dominate the suite's runtime.
Run with ``-s`` to watch the per-criterion lines as they come.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from slidefocus.cli import main as cli_main
from slidefocus.dataset import load_manifest
from slidefocus.errors import DirectionUndefinedError
from slidefocus.evaluation import (
    EvalRecord,
    LabelOracle,
    compute_dof_rate,
    compute_fd,
    compute_fe,
)
from slidefocus.network import FocusModel, ModelConfig, load_weights
from slidefocus.optics import (
    OpticsConfig,
    Region,
    brenner_score,
    estimate_cutoff_frequency,
    generate_patterned_slide,
    generate_slide,
    radial_power_spectrum,
    synthesize_stack,
)
from slidefocus.scanner import ScanConfig, cell_region, plan_trajectory, scan_slide

# Desk-scale protocol shared by criteria 4, 5, and 8.
PROTOCOL_SEED = 42
ABLATION_SEEDS = (42, 43, 44)
SYNTH_ARGS = ["synth", "--seed", str(PROTOCOL_SEED), "--slides", "18",
              "--test-slides", "3"]
TRAIN_ARGS = ["--base-channels", "8", "--epochs", "30"]


def run_cli(argv):
    return cli_main([str(a) for a in argv])


def train_variant(dataset: Path, out: Path, variant: str, seed: int) -> Path:
    code = run_cli([
        "train", "--data", dataset, "--out", out, "--variant", variant,
        "--seed", seed, *TRAIN_ARGS,
    ])
    assert code == 0
    return out / "best.weights"


def aggregated_test_metrics(dataset: Path, weights: Path, out: Path) -> dict:
    code = run_cli([
        "eval", "--data", dataset, "--out", out, "--model", weights,
        "--split", "test", "--aggregate",
    ])
    assert code == 0
    return json.loads((out / "metrics.json").read_text())


@pytest.fixture(scope="session")
def acceptance_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance") / "dset"
    assert run_cli(SYNTH_ARGS + ["--out", root]) == 0
    return root


@pytest.fixture(scope="session")
def criterion4_run(acceptance_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("criterion4")
    started = time.monotonic()
    weights = train_variant(acceptance_dataset, out / "train", "spatiospectral",
                            PROTOCOL_SEED)
    metrics = aggregated_test_metrics(acceptance_dataset, weights, out / "eval")
    elapsed = time.monotonic() - started
    return {"weights": weights, "metrics": metrics, "elapsed_s": elapsed}


def test_criterion_1_brenner_oracle_agreement():
    started = time.monotonic()
    hits = 0
    n_stacks = 50
    optics = OpticsConfig()
    spacing = 40.0 / 20
    for seed in range(n_stacks):
        slide = generate_slide(7000 + seed, (256, 256), 0.7, focal_amplitude_um=0.0)
        stack = synthesize_stack(slide, Region(48, 48, 160, 160), 21, 20.0, optics)
        scores = [brenner_score(img) for img in stack.images]
        best = stack.z_offsets_um[int(np.argmax(scores))]
        hits += abs(best) <= spacing + 1e-9
    elapsed = time.monotonic() - started
    assert hits / n_stacks >= 0.95
    assert elapsed < 60.0
    print(f"\nACCEPTANCE 1 PASS: brenner argmax within one slice on "
          f"{hits}/{n_stacks} stacks ({elapsed:.1f}s)")


def test_criterion_2_cutoff_frequency_monotone():
    started = time.monotonic()
    optics = OpticsConfig()
    for seed in range(20):
        slide = generate_slide(8000 + seed, (256, 256), 0.7, focal_amplitude_um=0.0)
        stack = synthesize_stack(slide, Region(48, 48, 160, 160), 21, 20.0, optics)
        cuts = [estimate_cutoff_frequency(img) for img in stack.images]
        nyquist = radial_power_spectrum(stack.images[0]).size - 1
        tolerance = 1.0 / nyquist + 1e-12
        mid = len(cuts) // 2
        for arm in (cuts[mid:], cuts[:mid + 1][::-1]):  # outward from z = 0
            for a, b in zip(arm, arm[1:]):
                assert b <= a + tolerance
    elapsed = time.monotonic() - started
    assert elapsed < 60.0
    print(f"\nACCEPTANCE 2 PASS: cut-off non-increasing (one-bin tolerance) "
          f"along 20 stacks x 2 arms ({elapsed:.1f}s)")


def test_criterion_3_full_gradient_check():
    started = time.monotonic()
    torch.manual_seed(0)
    model = FocusModel.create(
        ModelConfig(variant="spatiospectral", base_channels=2, input_size=(32, 32, 3)),
        seed=1,
    )
    net = model.net.double()
    net.eval()  # freeze batch-norm statistics: the loss must be stateless
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    target = torch.tensor([0.35, -0.6], dtype=torch.float64)

    def loss_value():
        return torch.nn.functional.smooth_l1_loss(net(x), target, beta=0.1)

    loss = loss_value()
    net.zero_grad()
    loss.backward()

    checked = 0
    worst = 0.0
    for param in net.parameters():
        flat = param.detach().view(-1)
        grad = param.grad.view(-1)
        for i in range(flat.numel()):
            h = 1e-5 * max(1.0, abs(float(flat[i])))
            with torch.no_grad():
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_value())
                flat[i] = orig - h
                down = float(loss_value())
                flat[i] = orig
            fd = (up - down) / (2.0 * h)
            an = float(grad[i])
            err = abs(fd - an)
            bound = 1e-3 * max(abs(fd), abs(an)) + 1e-8
            assert err <= bound, f"param element {checked}: fd={fd} an={an}"
            worst = max(worst, err / max(bound, 1e-30))
            checked += 1
    elapsed = time.monotonic() - started
    assert elapsed < 300.0
    print(f"\nACCEPTANCE 3 PASS: {checked} parameters match finite differences "
          f"within 1e-3 relative ({elapsed:.1f}s)")


def test_criterion_4_desk_scale_training(criterion4_run):
    m = criterion4_run["metrics"]
    elapsed = criterion4_run["elapsed_s"]
    assert m["aggregated"] is True
    assert m["fe_mean_um"] <= 4.0
    assert m["fd_rate"] is not None and m["fd_rate"] <= 0.05
    assert m["dof_rate"] >= 0.80
    assert elapsed <= 30 * 60
    print(f"\nACCEPTANCE 4 PASS: held-out aggregated FE={m['fe_mean_um']:.2f}um "
          f"FD={100 * m['fd_rate']:.2f}% DoF={100 * m['dof_rate']:.2f}% "
          f"({elapsed / 60:.1f} min)")


def test_criterion_5_ablation_ordering(acceptance_dataset, criterion4_run,
                                        tmp_path_factory):
    out = tmp_path_factory.mktemp("criterion5")
    ordered = 0
    details = []
    for seed in ABLATION_SEEDS:
        if seed == PROTOCOL_SEED:
            fused_fe = criterion4_run["metrics"]["fe_mean_um"]
        else:
            weights = train_variant(acceptance_dataset, out / f"sps_{seed}",
                                    "spatiospectral", seed)
            fused_fe = aggregated_test_metrics(
                acceptance_dataset, weights, out / f"sps_{seed}_eval")["fe_mean_um"]
        weights = train_variant(acceptance_dataset, out / f"spec_{seed}",
                                "spectral", seed)
        spectral_fe = aggregated_test_metrics(
            acceptance_dataset, weights, out / f"spec_{seed}_eval")["fe_mean_um"]
        ordered += spectral_fe > fused_fe
        details.append(f"seed {seed}: spectral {spectral_fe:.2f} vs "
                       f"spatiospectral {fused_fe:.2f}")
    assert ordered >= 2, details
    print(f"\nACCEPTANCE 5 PASS: spectral-only FE higher on {ordered}/3 seeds "
          f"({'; '.join(details)})")


def test_criterion_6_metric_examples_and_invariants():
    def rec(true, pred):
        return EvalRecord(true_z_um=true, pred_z_um=pred)

    # spec examples, exact
    assert compute_fe([rec(1.0, 1.0), rec(-2.0, -2.0)]) == (0.0, 0.0)
    mean, std = compute_fe([rec(0.0, 1.0), rec(0.0, 3.0)])
    assert (mean, std) == (2.0, 1.0)
    assert compute_fd([rec(+2.0, +1.0), rec(+1.0, -2.0)]) == 0.5
    assert compute_fd([rec(3.0, 1.0), rec(-3.0, -0.5)]) == 0.0
    assert compute_dof_rate([rec(0.0, 0.3), rec(0.0, 0.7)], dof_um=1.0) == 0.5
    assert compute_dof_rate([rec(2.0, 2.0)], dof_um=1.0) == 1.0
    with pytest.raises(DirectionUndefinedError):
        compute_fd([rec(0.2, 1.0)], direction_epsilon=0.5)

    rng = np.random.default_rng(123)
    for _ in range(100):
        n = int(rng.integers(5, 60))
        records = [rec(float(t), float(p))
                   for t, p in zip(rng.uniform(-20, 20, n), rng.uniform(-20, 20, n))]
        c = float(rng.uniform(0.2, 8.0))
        scaled = [rec(r.true_z_um * c, r.pred_z_um * c) for r in records]
        fe, fe_std = compute_fe(records)
        sfe, sfe_std = compute_fe(scaled)
        assert sfe == pytest.approx(c * fe) and sfe_std == pytest.approx(c * fe_std)
        assert compute_fd(scaled) == pytest.approx(compute_fd(records))
        dof = float(rng.uniform(0.5, 6.0))
        assert compute_dof_rate(scaled, dof * c) == pytest.approx(
            compute_dof_rate(records, dof))
        perm = [records[i] for i in rng.permutation(n)]
        assert compute_fe(perm) == pytest.approx(compute_fe(records), rel=1e-12)
        assert compute_fd(perm) == compute_fd(records)
        assert compute_dof_rate(perm, dof) == compute_dof_rate(records, dof)
        assert 0.0 <= compute_fd(records) <= 1.0
        assert 0.0 <= compute_dof_rate(records, dof) <= 1.0
    print("\nACCEPTANCE 6 PASS: metric examples exact; equivariance and "
          "permutation invariance on 100 record sets")


def test_criterion_7_scan_pipeline(tmp_path):
    started = time.monotonic()
    cell = (180, 320)
    grid = (4, 4)
    tissue_cells = [(0, 0), (2, 1), (1, 2), (3, 3), (0, 3)]
    size = (grid[1] * cell[0], grid[0] * cell[1])
    regions = [cell_region(size, grid, c, cell) for c in tissue_cells]
    slide = generate_patterned_slide(31, size, regions)
    config = ScanConfig(tau=0.9, fov_px=cell, tile_size=160,
                        low_res=(320, 180), high_res=(640, 360), desk_scale=1.0)
    report = scan_slide(slide, config, LabelOracle(), OpticsConfig(),
                        out_dir=tmp_path, slide_id="acceptance7")

    skipped = {(t.grid_x, t.grid_y) for t in report.tiles if t.skipped_empty}
    captured = {(t.grid_x, t.grid_y) for t in report.tiles if t.capture_path}
    assert skipped == set(plan_trajectory(grid)) - set(tissue_cells)
    assert len(skipped) == 11
    assert captured == set(tissue_cells)
    for t in report.tiles:
        assert t.model_frames == (0 if t.skipped_empty else 1)
        if t.capture_path:
            assert (tmp_path / t.capture_path).exists()
    assert report.trajectory == plan_trajectory(grid)
    assert [(t.grid_x, t.grid_y) for t in report.tiles] == report.trajectory
    elapsed = time.monotonic() - started
    assert elapsed < 120.0
    print(f"\nACCEPTANCE 7 PASS: 11 skips, 5 single-shot captures, serpentine "
          f"order ({elapsed:.1f}s)")


def test_criterion_8_end_to_end_scan(criterion4_run, tmp_path):
    model = load_weights(criterion4_run["weights"])
    optics = OpticsConfig(**{**model.meta["optics"], "seed": 9001})
    slide = generate_slide(9001, (1440, 2560), 0.7, focal_amplitude_um=5.0)
    config = ScanConfig(desk_scale=0.5, z_precision_um=2.0, dof_um=model.meta["dof_um"])
    report = scan_slide(slide, config, model, optics,
                        out_dir=tmp_path, slide_id="acceptance8")
    assert report.complete
    focused = [t for t in report.tiles if t.stage_z_um is not None]
    assert focused, "scan never reached a tissue cell"
    for t in focused:
        assert t.stage_z_um == pytest.approx(round(t.stage_z_um / 2.0) * 2.0, abs=1e-9)
    assert report.dof_rate is not None and report.dof_rate >= 0.80
    print(f"\nACCEPTANCE 8 PASS: scan dof_rate={100 * report.dof_rate:.2f}% over "
          f"{len(focused)} tissue tiles, all stage z on the 2 um grid")


def test_criterion_9_cli_determinism(tmp_path):
    synth = ["synth", "--slides", "3", "--slide-size", "320", "--fov", "224",
             "--stack-slices", "5", "--z-range-um", "8", "--test-slides", "1",
             "--seed", "5"]
    datasets = []
    for name in ("a", "b"):
        out = tmp_path / f"dset_{name}"
        assert run_cli(synth + ["--out", out]) == 0
        datasets.append(out)
    synth_files = ["train.jsonl", "val.jsonl", "test.jsonl", "dataset.json",
                   "config.json"]
    for name in synth_files:
        assert (datasets[0] / name).read_bytes() == (datasets[1] / name).read_bytes()

    trains = []
    for name in ("a", "b"):
        out = tmp_path / f"train_{name}"
        assert run_cli(["train", "--data", datasets[0], "--out", out,
                        "--base-channels", "4", "--epochs", "2", "--seed", "6"]) == 0
        trains.append(out)
    for name in ("history.csv", "best.weights", "latest.weights", "checkpoint.json",
                 "config.json"):
        assert (trains[0] / name).read_bytes() == (trains[1] / name).read_bytes()

    evals = []
    for name in ("a", "b"):
        out = tmp_path / f"eval_{name}"
        assert run_cli(["eval", "--data", datasets[0], "--out", out,
                        "--model", trains[0] / "best.weights", "--seed", "6"]) == 0
        evals.append(out)
    for name in ("metrics.json", "error_vs_distance.csv", "config.json"):
        assert (evals[0] / name).read_bytes() == (evals[1] / name).read_bytes()

    scans = []
    for name in ("a", "b"):
        out = tmp_path / f"scan_{name}"
        assert run_cli(["scan", "--model", trains[0] / "best.weights", "--out", out,
                        "--slide-height", "360", "--slide-width", "1280",
                        "--slide-seed", "12", "--seed", "6"]) == 0
        scans.append(out)
    for name in ("scan_report.json", "trajectory.csv", "config.json"):
        assert (scans[0] / name).read_bytes() == (scans[1] / name).read_bytes()
    captures = sorted((scans[0] / "captures").glob("**/*.png"))
    for pa in captures:
        pb = scans[1] / pa.relative_to(scans[0])
        assert pa.read_bytes() == pb.read_bytes()
    print("\nACCEPTANCE 9 PASS: synth/train/eval/scan byte-identical across "
          "seeded reruns")
