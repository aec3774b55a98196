import numpy as np
import pytest

from slidefocus.errors import ConfigurationError, ParameterError, RegionError
from slidefocus.evaluation import LabelOracle
from slidefocus.optics import (
    OpticsConfig,
    Region,
    generate_patterned_slide,
    generate_slide,
    render_region,
)
from slidefocus.scanner import (
    ScanConfig,
    StageModel,
    autofocus_step,
    capture,
    cell_region,
    is_empty_region,
    plan_trajectory,
    quantize_z,
    scan_slide,
)

CELL = (180, 320)  # (height, width): scaled low-res frame at desk_scale 0.5


def tiny_scan_config(**kw):
    # 320x180 cells with 160 px tiles keep the scan tests fast
    base = dict(fov_px=CELL, tile_size=160, low_res=(320, 180), high_res=(640, 480),
                desk_scale=1.0)
    base.update(kw)
    return ScanConfig(**base)


def patterned(grid, tissue_cells, seed=1, **kw):
    nx, ny = grid
    size = (ny * CELL[0], nx * CELL[1])
    regions = [cell_region(size, grid, c, CELL) for c in tissue_cells]
    return generate_patterned_slide(seed, size, regions, **kw)


class TestPlanTrajectory:
    def test_two_by_two(self):
        assert plan_trajectory((2, 2)) == [(1, 0), (0, 0), (0, 1), (1, 1)]

    def test_single_cell(self):
        assert plan_trajectory((1, 1)) == [(0, 0)]

    def test_coverage_and_uniqueness(self):
        for nx, ny in ((3, 4), (5, 2), (1, 6)):
            cells = plan_trajectory((nx, ny))
            assert len(cells) == nx * ny
            assert len(set(cells)) == nx * ny
            assert cells[0] == (nx - 1, 0)

    def test_zero_grid(self):
        with pytest.raises(ParameterError):
            plan_trajectory((0, 3))


class TestIsEmptyRegion:
    def test_all_white_is_empty(self):
        assert is_empty_region(np.ones((8, 8, 3)), tau=0.9) is True

    def test_all_black_is_tissue(self):
        assert is_empty_region(np.zeros((8, 8, 3)), tau=0.1) is False

    def test_half_tissue_phantom(self):
        s = generate_slide(3, (512, 512), 0.5)
        assert is_empty_region(s.sharp_image, tau=0.9) is False

    def test_zero_pixel_image(self):
        with pytest.raises(ParameterError):
            is_empty_region(np.zeros((0, 0, 3)), tau=0.5)


class TestStageQuantization:
    def test_round_to_nearest_multiple(self):
        assert quantize_z(3.1, 2.0) == 4.0
        assert quantize_z(2.9, 2.0) == 2.0

    def test_ties_away_from_zero(self):
        assert quantize_z(3.0, 2.0) == 4.0
        assert quantize_z(-3.0, 2.0) == -4.0

    def test_exact_multiples_unchanged(self):
        assert quantize_z(-6.0, 2.0) == -6.0

    def test_stage_commands_are_quantized(self):
        stage = StageModel(z_precision_um=2.0)
        assert stage.move_z(3.1) == 4.0
        assert stage.z_um == 4.0

    def test_stage_limits(self):
        stage = StageModel(z_limits_um=(-10.0, 10.0))
        with pytest.raises(RegionError):
            stage.move_z(11.0)


class TestCapture:
    def test_identity_at_focal_plane(self):
        slide = generate_slide(5, (360, 640), 0.6, focal_amplitude_um=0.0)
        optics = OpticsConfig(chroma_offset_um=0.0, noise_sigma=0.0)
        stage = StageModel(z_um=0.0)
        region = Region(0, 0, 180, 320)
        out = capture(slide, stage, (320, 180), optics, region)
        assert np.array_equal(out, slide.sharp_image[:180, :320])

    def test_deterministic(self):
        slide = generate_slide(5, (360, 640), 0.6)
        optics = OpticsConfig(seed=3)
        stage = StageModel(z_um=4.0)
        region = Region(0, 0, 180, 320)
        a = capture(slide, stage, (160, 90), optics, region)
        b = capture(slide, stage, (160, 90), optics, region)
        assert np.array_equal(a, b)

    def test_commanded_z_is_rendered_quantized(self):
        slide = generate_slide(5, (360, 640), 0.6, focal_amplitude_um=0.0)
        optics = OpticsConfig(chroma_offset_um=0.0, noise_sigma=0.0)
        region = Region(0, 0, 180, 320)
        stage = StageModel(z_precision_um=2.0)
        stage.move_z(3.1)  # lands at 4.0
        got = capture(slide, stage, (320, 180), optics, region)
        expected = render_region(slide, region, 4.0, optics)
        assert np.array_equal(got, expected)


class TestAutofocusStep:
    def setup_method(self):
        self.slide = generate_slide(8, (360, 640), 0.9, focal_amplitude_um=3.0)
        self.optics = OpticsConfig()
        self.region = Region(0, 0, 180, 320)

    def test_oracle_lands_within_half_precision(self):
        stage = StageModel(z_um=8.0, z_precision_um=2.0)
        cfg = tiny_scan_config()
        pred, stage = autofocus_step(
            LabelOracle(), stage, self.slide, self.optics, self.region, cfg,
            rng=np.random.default_rng(0),
        )
        z_star = self.slide.mean_focal_um(self.region)
        assert abs(stage.z_um - z_star) <= 1.0 + 1e-9

    def test_zero_model_leaves_stage_unchanged(self):
        stage = StageModel(z_um=6.0, z_precision_um=2.0)

        class ZeroModel:
            def predict_from_labels(self, labels, rng):
                return np.zeros_like(labels)

        _, stage = autofocus_step(
            ZeroModel(), stage, self.slide, self.optics, self.region,
            tiny_scan_config(), rng=np.random.default_rng(0),
        )
        assert stage.z_um == 6.0

    def test_frame_too_small_for_tiles(self):
        stage = StageModel()
        cfg = tiny_scan_config(tile_size=224)  # frame is 320x180 < 224 rows
        with pytest.raises(ConfigurationError):
            autofocus_step(LabelOracle(), stage, self.slide, self.optics,
                           self.region, cfg, rng=np.random.default_rng(0))


class TestScanSlide:
    def test_blank_slide_all_skipped(self, tmp_path):
        slide = patterned((2, 2), [])
        report = scan_slide(slide, tiny_scan_config(), LabelOracle(), OpticsConfig(),
                            out_dir=tmp_path, slide_id="blank")
        assert report.n_tiles == 4
        assert report.n_skipped == 4
        assert report.dof_rate is None
        assert not list((tmp_path / "blank").glob("*.png"))
        assert report.summary_line() == "tiles=4 skipped=4 dof_rate=n/a"

    def test_single_tissue_cell(self, tmp_path):
        slide = patterned((3, 3), [(1, 1)])
        report = scan_slide(slide, tiny_scan_config(), LabelOracle(), OpticsConfig(),
                            out_dir=tmp_path, slide_id="one")
        assert report.n_skipped == 8
        captured = [t for t in report.tiles if t.capture_path]
        assert len(captured) == 1
        assert (captured[0].grid_x, captured[0].grid_y) == (1, 1)
        assert (tmp_path / captured[0].capture_path).exists()

    def test_trajectory_matches_plan(self, tmp_path):
        slide = patterned((3, 2), [(0, 0)])
        report = scan_slide(slide, tiny_scan_config(), LabelOracle(), OpticsConfig())
        assert report.trajectory == plan_trajectory((3, 2))
        assert [(t.grid_x, t.grid_y) for t in report.tiles] == report.trajectory

    def test_no_tissue_cell_is_skipped_when_covered(self):
        # cells holding > 20% tissue must never be gated out at tau = 0.9
        slide = patterned((3, 3), [(0, 0), (2, 1), (1, 2)], fill_fraction=0.25)
        report = scan_slide(slide, tiny_scan_config(), LabelOracle(), OpticsConfig())
        grid = report.grid
        for t in report.tiles:
            region = cell_region(slide.size_px, grid, (t.grid_x, t.grid_y), CELL)
            frac = slide.tissue_mask[region.row0:region.row1, region.col0:region.col1].mean()
            if frac > 0.20:
                assert not t.skipped_empty

    def test_single_shot_contract(self):
        slide = patterned((2, 2), [(0, 0), (1, 1)])
        report = scan_slide(slide, tiny_scan_config(), LabelOracle(), OpticsConfig())
        for t in report.tiles:
            assert t.model_frames == (0 if t.skipped_empty else 1)

    def test_stage_positions_quantized(self):
        slide = patterned((2, 2), [(0, 0), (0, 1), (1, 0), (1, 1)])
        report = scan_slide(slide, tiny_scan_config(z_precision_um=2.0),
                            LabelOracle(), OpticsConfig())
        for t in report.tiles:
            if t.stage_z_um is not None:
                assert t.stage_z_um == pytest.approx(round(t.stage_z_um / 2.0) * 2.0)

    def test_model_failure_marks_tile(self):
        slide = patterned((2, 1), [(0, 0), (1, 0)])

        class FlakyModel:
            def __init__(self):
                self.calls = 0

            def predict_from_labels(self, labels, rng):
                self.calls += 1
                if self.calls == 1:
                    raise RuntimeError("boom")
                return labels.copy()

        report = scan_slide(slide, tiny_scan_config(), FlakyModel(), OpticsConfig())
        failed = [t for t in report.tiles if t.failed]
        assert len(failed) == 1
        assert not report.complete

    def test_overlap_densifies_grid(self):
        from slidefocus.scanner import grid_for_slide

        slide = patterned((2, 2), [(0, 0)])
        cfg = tiny_scan_config(overlap_fraction=0.5)
        cell = cfg.cell_px()
        assert grid_for_slide(slide.size_px, cell, cfg.step_px(cell)) == (3, 3)
        report = scan_slide(slide, cfg, LabelOracle(), OpticsConfig())
        assert report.grid == (3, 3)
        assert report.n_tiles == 9

    def test_fov_mm_sets_cell_size(self):
        cfg = tiny_scan_config(fov_mm=0.2)
        assert cfg.cell_px(px_per_mm=1000.0) == (200, 200)

    def test_report_round_trip(self, tmp_path):
        import json

        from slidefocus.scanner import save_report

        slide = patterned((2, 2), [(1, 1)])
        report = scan_slide(slide, tiny_scan_config(), LabelOracle(), OpticsConfig(),
                            out_dir=tmp_path, slide_id="s")
        save_report(report, tmp_path)
        payload = json.loads((tmp_path / "scan_report.json").read_text())
        assert payload["totals"]["tiles"] == 4
        csv_text = (tmp_path / "trajectory.csv").read_text()
        assert csv_text.splitlines()[0] == "order,grid_x,grid_y,skipped,pred_z_um,true_z_um,in_dof"
        assert len(csv_text.strip().splitlines()) == 5
