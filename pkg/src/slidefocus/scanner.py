"""Virtual slide scanner: trajectory, tissue gating, one-shot focus, capture.

The scan replays the four-stage digitization loop on a :class:`VirtualSlide`:
serpentine traversal from the bottom-right corner, an HSV-value emptiness
check on a low-resolution frame, a single-shot focus correction predicted
from that same frame (no refocusing iterations), and a high-resolution
capture at the corrected, quantized stage position.

The stage models real hardware limits: every commanded z snaps to the
nearest multiple of its precision (2 um by default, ties away from zero).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .dataset import aggregate_prediction, tile_image
from .errors import ConfigurationError, ParameterError, RegionError
from .optics import OpticsConfig, Region, VirtualSlide, noise_rng, render_region, save_png

LOW_RES = (1280, 720)  # (width, height)
HIGH_RES = (4056, 3040)


def quantize_z(z_um: float, precision_um: float) -> float:
    """Snap to the nearest multiple of the precision, ties away from zero."""
    if precision_um <= 0:
        raise ParameterError(f"precision must be > 0, got {precision_um}")
    steps = np.floor(abs(z_um) / precision_um + 0.5)
    return float(np.sign(z_um) * steps * precision_um)


@dataclass
class StageModel:
    """Motorized x-y-z stage with finite z precision and travel limits."""

    x_mm: float = 0.0
    y_mm: float = 0.0
    z_um: float = 0.0
    z_precision_um: float = 2.0
    xy_step_mm: float = 0.0
    z_limits_um: tuple[float, float] = (-200.0, 200.0)

    def __post_init__(self):
        self.z_um = self._checked(quantize_z(self.z_um, self.z_precision_um))

    def _checked(self, z: float) -> float:
        lo, hi = self.z_limits_um
        if not lo <= z <= hi:
            raise RegionError(f"stage z {z} um outside limits {self.z_limits_um}")
        return z

    def move_z(self, z_um: float) -> float:
        """Command an absolute z; the stage lands on the quantized value."""
        self.z_um = self._checked(quantize_z(z_um, self.z_precision_um))
        return self.z_um

    def move_xy(self, x_mm: float, y_mm: float) -> None:
        self.x_mm = x_mm
        self.y_mm = y_mm


@dataclass
class ScanConfig:
    """Scan parameters; resolutions follow the (width, height) convention."""

    tau: float = 0.9
    low_res: tuple[int, int] = LOW_RES
    high_res: tuple[int, int] = HIGH_RES
    desk_scale: float = 0.5
    fov_mm: float | None = None  # physical cell width; overrides fov_px
    fov_px: tuple[int, int] | None = None  # (height, width) of one grid cell
    overlap_fraction: float = 0.0
    tile_size: int = 224
    dof_um: float | None = None
    initial_z_um: float = 0.0
    z_precision_um: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must be in (0, 1), got {self.tau}")
        if not 0.0 < self.desk_scale <= 1.0:
            raise ConfigurationError(f"desk_scale must be in (0, 1], got {self.desk_scale}")
        if min(self.low_res) <= 0 or min(self.high_res) <= 0:
            raise ConfigurationError("resolutions must be positive")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ConfigurationError(
                f"overlap_fraction must be in [0, 1), got {self.overlap_fraction}"
            )

    @property
    def low_res_scaled(self) -> tuple[int, int]:
        return (round(self.low_res[0] * self.desk_scale), round(self.low_res[1] * self.desk_scale))

    @property
    def high_res_scaled(self) -> tuple[int, int]:
        return (round(self.high_res[0] * self.desk_scale), round(self.high_res[1] * self.desk_scale))

    def cell_px(self, px_per_mm: float | None = None) -> tuple[int, int]:
        """Grid cell size on the slide; defaults to the scaled low-res frame."""
        if self.fov_mm is not None:
            if px_per_mm is None:
                raise ConfigurationError("fov_mm needs the slide's pixel pitch")
            side = max(1, round(self.fov_mm * px_per_mm))
            return (side, side)
        if self.fov_px is not None:
            return self.fov_px
        w, h = self.low_res_scaled
        return (h, w)

    def step_px(self, cell: tuple[int, int]) -> tuple[int, int]:
        """Scan step between cell origins; equals the cell when no overlap."""
        return (
            max(1, round(cell[0] * (1.0 - self.overlap_fraction))),
            max(1, round(cell[1] * (1.0 - self.overlap_fraction))),
        )


@dataclass
class TileRecord:
    order: int
    grid_x: int
    grid_y: int
    skipped_empty: bool
    failed: bool = False
    pred_z_um: float | None = None
    true_z_um: float | None = None
    stage_z_um: float | None = None
    in_dof: bool | None = None
    capture_path: str | None = None
    model_frames: int = 0


@dataclass
class ScanReport:
    slide_id: str
    grid: tuple[int, int]
    trajectory: list[tuple[int, int]]
    tiles: list[TileRecord]
    tau: float
    dof_um: float
    complete: bool = True

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    @property
    def n_skipped(self) -> int:
        return sum(t.skipped_empty for t in self.tiles)

    @property
    def dof_rate(self) -> float | None:
        flags = [t.in_dof for t in self.tiles if t.in_dof is not None]
        if not flags:
            return None
        return float(np.mean(flags))

    def summary_line(self) -> str:
        rate = self.dof_rate
        rate_text = "n/a" if rate is None else f"{100.0 * rate:.2f}%"
        return f"tiles={self.n_tiles} skipped={self.n_skipped} dof_rate={rate_text}"

    def to_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "grid": list(self.grid),
            "trajectory": [list(c) for c in self.trajectory],
            "tau": self.tau,
            "dof_um": self.dof_um,
            "complete": self.complete,
            "totals": {
                "tiles": self.n_tiles,
                "skipped": self.n_skipped,
                "dof_rate": self.dof_rate,
            },
            "tiles": [
                {
                    "order": t.order,
                    "grid_x": t.grid_x,
                    "grid_y": t.grid_y,
                    "skipped_empty": t.skipped_empty,
                    "failed": t.failed,
                    "pred_z_um": t.pred_z_um,
                    "true_z_um": t.true_z_um,
                    "stage_z_um": t.stage_z_um,
                    "in_dof": t.in_dof,
                    "capture_path": t.capture_path,
                    "model_frames": t.model_frames,
                }
                for t in self.tiles
            ],
        }

    def trajectory_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["order", "grid_x", "grid_y", "skipped", "pred_z_um", "true_z_um", "in_dof"])
        for t in self.tiles:
            writer.writerow([
                t.order, t.grid_x, t.grid_y, int(t.skipped_empty),
                "" if t.pred_z_um is None else repr(t.pred_z_um),
                "" if t.true_z_um is None else repr(t.true_z_um),
                "" if t.in_dof is None else int(t.in_dof),
            ])
        return buffer.getvalue()


def plan_trajectory(grid: tuple[int, int]) -> list[tuple[int, int]]:
    """Serpentine cell order starting at the bottom-right corner.

    Cells are (gx, gy) with gy = 0 the bottom row. The bottom row is swept
    right to left, the next row left to right, and so on; every cell
    appears exactly once.
    """
    nx, ny = grid
    if nx < 1 or ny < 1:
        raise ParameterError(f"grid must be at least 1x1, got {grid}")
    cells = []
    for gy in range(ny):
        xs = range(nx - 1, -1, -1) if gy % 2 == 0 else range(nx)
        cells.extend((gx, gy) for gx in xs)
    return cells


def cell_region(
    slide_shape: tuple[int, int],
    grid: tuple[int, int],
    cell: tuple[int, int],
    cell_px: tuple[int, int],
    step_px: tuple[int, int] | None = None,
) -> Region:
    """Pixel window of one grid cell; gy = 0 is the bottom row of the grid.

    ``step_px`` spaces cell origins (smaller than the cell when scanning
    with overlap); it defaults to the cell size.
    """
    nx, ny = grid
    gx, gy = cell
    cell_h, cell_w = cell_px
    step_h, step_w = step_px if step_px is not None else cell_px
    if not (0 <= gx < nx and 0 <= gy < ny):
        raise RegionError(f"cell {cell} outside grid {grid}")
    row0 = (ny - 1 - gy) * step_h
    col0 = gx * step_w
    region = Region(row0, col0, cell_h, cell_w)
    h, w = slide_shape
    if region.row1 > h or region.col1 > w:
        raise RegionError(f"cell {cell} region {region} outside slide {slide_shape}")
    return region


def grid_for_slide(
    slide_shape: tuple[int, int],
    cell_px: tuple[int, int],
    step_px: tuple[int, int] | None = None,
) -> tuple[int, int]:
    """Number of (columns, rows) the scan grid fits on a slide."""
    h, w = slide_shape
    cell_h, cell_w = cell_px
    step_h, step_w = step_px if step_px is not None else cell_px
    if h < cell_h or w < cell_w:
        return (0, 0)
    return ((w - cell_w) // step_w + 1, (h - cell_h) // step_h + 1)


def is_empty_region(image: np.ndarray, tau: float) -> bool:
    """True (skip) when the mean HSV value channel exceeds the threshold.

    Brightfield background is bright, so a high mean V marks an empty field.
    """
    arr = np.asarray(image)
    if arr.size == 0:
        raise ParameterError("cannot classify an empty image")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ParameterError(f"expected an RGB image, got shape {arr.shape}")
    value = arr.max(axis=2)
    return float(value.mean()) > tau


def capture(
    slide: VirtualSlide,
    stage: StageModel,
    resolution: tuple[int, int],
    optics: OpticsConfig,
    region: Region,
) -> np.ndarray:
    """Render the region at the stage's (quantized) z, resampled to a resolution.

    Sensor noise is applied at the capture resolution, so two captures at the
    same pose with the same optics seed are identical.
    """
    out_w, out_h = resolution
    raw = render_region(slide, region, stage.z_um, optics, add_noise=False)
    if (region.width, region.height) != (out_w, out_h):
        interp = cv2.INTER_AREA if out_w < region.width else cv2.INTER_LINEAR
        raw = cv2.resize(np.ascontiguousarray(raw), (out_w, out_h), interpolation=interp)
    if optics.noise_sigma > 0:
        rng = noise_rng(optics, stage.z_um, (region.row0, region.col0, out_w, out_h))
        raw = raw + rng.normal(0.0, optics.noise_sigma, size=raw.shape).astype(np.float32)
    return np.clip(raw, 0.0, 1.0)


def _predict_tiles(model, tiles: list[np.ndarray], true_defocus_um: float, rng) -> np.ndarray:
    if hasattr(model, "predict_from_labels"):
        labels = np.full(len(tiles), true_defocus_um)
        return model.predict_from_labels(labels, rng)
    return model.predict_batch(np.stack(tiles))


def autofocus_step(
    model,
    stage: StageModel,
    slide: VirtualSlide,
    optics: OpticsConfig,
    region: Region,
    config: ScanConfig,
    frame: np.ndarray | None = None,
    rng=None,
) -> tuple[float, StageModel]:
    """One-shot focus correction from a single low-resolution frame.

    Tiles the frame, predicts one signed defocus per tile, aggregates by
    median, and moves the stage by the negated aggregate. Exactly one model
    invocation set per tile; no iterative refinement. If ``frame`` is given
    (the detection frame), it is reused instead of capturing a new one.
    """
    if frame is None:
        frame = capture(slide, stage, config.low_res_scaled, optics, region)
    tiles = [t for _, t in tile_image(frame, config.tile_size, keep_partial=False)]
    if not tiles:
        raise ConfigurationError(
            f"low-res frame {frame.shape[:2]} is smaller than one "
            f"{config.tile_size} px tile; increase desk_scale"
        )
    true_defocus = stage.z_um - slide.mean_focal_um(region)
    preds = _predict_tiles(model, tiles, true_defocus, rng)
    prediction = aggregate_prediction(preds)
    stage.move_z(stage.z_um - prediction)
    return prediction, stage


def scan_slide(
    slide: VirtualSlide,
    config: ScanConfig,
    model,
    optics: OpticsConfig,
    out_dir: Path | str | None = None,
    slide_id: str = "slide",
) -> ScanReport:
    """Run the full four-stage scan over a slide.

    For each trajectory cell: low-res capture, emptiness check, one-shot
    autofocus (reusing the detection frame), then a high-res capture at the
    corrected position. Captures land under ``out_dir/<slide_id>/``.
    """
    h, w = slide.size_px
    px_per_mm = w / slide.physical_extent[0]
    cell = config.cell_px(px_per_mm)
    step = config.step_px(cell)
    nx, ny = grid_for_slide((h, w), cell, step)
    if nx < 1 or ny < 1:
        raise ConfigurationError(
            f"slide {h}x{w} px is smaller than one {cell[0]}x{cell[1]} px cell"
        )
    dof_um = config.dof_um if config.dof_um is not None else optics.dof_um
    trajectory = plan_trajectory((nx, ny))
    stage = StageModel(z_um=config.initial_z_um, z_precision_um=config.z_precision_um)
    rng = np.random.default_rng(optics.seed)

    capture_dir = None
    if out_dir is not None:
        capture_dir = Path(out_dir) / slide_id
        capture_dir.mkdir(parents=True, exist_ok=True)

    tiles: list[TileRecord] = []
    complete = True
    for order, (gx, gy) in enumerate(trajectory):
        region = cell_region((h, w), (nx, ny), (gx, gy), cell, step)
        stage.move_xy(
            (region.col0 + region.width / 2) / px_per_mm,
            (region.row0 + region.height / 2) / px_per_mm,
        )
        low = capture(slide, stage, config.low_res_scaled, optics, region)
        if is_empty_region(low, config.tau):
            tiles.append(TileRecord(order, gx, gy, skipped_empty=True))
            continue
        true_defocus = stage.z_um - slide.mean_focal_um(region)
        try:
            pred, _ = autofocus_step(
                model, stage, slide, optics, region, config, frame=low, rng=rng
            )
        except ConfigurationError:
            raise
        except Exception:
            tiles.append(TileRecord(
                order, gx, gy, skipped_empty=False, failed=True,
                true_z_um=true_defocus, model_frames=1,
            ))
            complete = False
            continue
        residual = stage.z_um - slide.mean_focal_um(region)
        in_dof = bool(abs(residual) <= dof_um / 2.0)
        path = None
        high = capture(slide, stage, config.high_res_scaled, optics, region)
        if capture_dir is not None:
            name = f"{ny - 1 - gy}_{gx}.png"  # {row}_{col} in image coordinates
            save_png(high, capture_dir / name)
            path = str(Path(slide_id) / name)
        tiles.append(TileRecord(
            order, gx, gy, skipped_empty=False,
            pred_z_um=float(pred), true_z_um=float(true_defocus),
            stage_z_um=stage.z_um, in_dof=in_dof,
            capture_path=path, model_frames=1,
        ))
    return ScanReport(
        slide_id=slide_id,
        grid=(nx, ny),
        trajectory=trajectory,
        tiles=tiles,
        tau=config.tau,
        dof_um=dof_um,
        complete=complete,
    )


def save_report(report: ScanReport, out_dir: Path | str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scan_report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    )
    (out / "trajectory.csv").write_text(report.trajectory_csv())
