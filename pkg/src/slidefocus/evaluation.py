"""Focus metrics: FE, false-direction rate, DoF-rate, and bucketed reports.

Conventions follow the rest of the package: errors are in micrometers,
"inside the depth of field" means the absolute error is at most half the
DoF (the acceptable band straddles the focal plane), and standard
deviations are population (divide by n). The false-direction rate only
counts records farther than ``direction_epsilon`` from the plane, since the
direction is meaningless at the plane itself.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetManifest, PatchLoader, aggregate_prediction
from .errors import DirectionUndefinedError, MetricError, ParameterError


@dataclass(frozen=True)
class EvalRecord:
    true_z_um: float
    pred_z_um: float
    source_id: tuple = ()
    aggregated: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.true_z_um) and np.isfinite(self.pred_z_um)):
            raise ParameterError("true and predicted z must be finite")

    @property
    def error_um(self) -> float:
        return abs(self.pred_z_um - self.true_z_um)


@dataclass
class BucketRow:
    lo_um: float
    hi_um: float
    fe_mean_um: float
    fe_std_um: float
    count: int


@dataclass
class MetricsReport:
    fe_mean_um: float
    fe_std_um: float
    fd_rate: float | None
    dof_rate: float
    n_records: int
    dof_um: float
    aggregated: bool
    direction_epsilon_um: float
    buckets: list[BucketRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "fe_mean_um": self.fe_mean_um,
            "fe_std_um": self.fe_std_um,
            "fd_rate": self.fd_rate,
            "dof_rate": self.dof_rate,
            "n_records": self.n_records,
            "dof_um": self.dof_um,
            "aggregated": self.aggregated,
            "direction_epsilon_um": self.direction_epsilon_um,
            "buckets": [
                {
                    "lo_um": b.lo_um,
                    "hi_um": b.hi_um,
                    "fe_mean_um": None if np.isnan(b.fe_mean_um) else b.fe_mean_um,
                    "fe_std_um": None if np.isnan(b.fe_std_um) else b.fe_std_um,
                    "count": b.count,
                }
                for b in self.buckets
            ],
        }

    def summary_line(self) -> str:
        fd = "n/a" if self.fd_rate is None else f"{100.0 * self.fd_rate:.2f}%"
        return (
            f"FE={self.fe_mean_um:.2f}±{self.fe_std_um:.2f}um "
            f"FD={fd} DoF={100.0 * self.dof_rate:.2f}%"
        )


def _errors(records: list[EvalRecord]) -> np.ndarray:
    return np.array([r.error_um for r in records], dtype=np.float64)


def compute_fe(records: list[EvalRecord]) -> tuple[float, float]:
    """Mean absolute focus error and its population standard deviation."""
    if not records:
        raise MetricError("focus error needs at least one record")
    errors = _errors(records)
    return float(errors.mean()), float(errors.std())


def compute_fd(records: list[EvalRecord], direction_epsilon: float = 0.0) -> float:
    """Fraction of predictions pointing to the wrong side of the plane.

    Records within ``direction_epsilon`` of the plane are excluded; a zero
    prediction counts as a wrong direction for any off-plane truth.
    """
    if not records:
        raise MetricError("false-direction rate needs at least one record")
    considered = [r for r in records if abs(r.true_z_um) > direction_epsilon]
    if not considered:
        raise DirectionUndefinedError(
            f"all {len(records)} records lie within {direction_epsilon} um of the plane"
        )
    wrong = sum(1 for r in considered if np.sign(r.pred_z_um) != np.sign(r.true_z_um))
    return wrong / len(considered)


def compute_dof_rate(records: list[EvalRecord], dof_um: float) -> float:
    """Fraction of predictions whose error stays within half the DoF."""
    if dof_um <= 0:
        raise ParameterError(f"dof_um must be > 0, got {dof_um}")
    if not records:
        raise MetricError("DoF rate needs at least one record")
    errors = _errors(records)
    return float((errors <= dof_um / 2.0).mean())


def error_vs_distance_report(
    records: list[EvalRecord], bucket_width_um: float
) -> list[BucketRow]:
    """Bucket focus errors by distance from the optimal plane.

    Buckets are [k*w, (k+1)*w) and cover [0, max |true z|]; empty buckets
    keep NaN statistics so the CSV shows the gap.
    """
    if bucket_width_um <= 0:
        raise ParameterError(f"bucket_width_um must be > 0, got {bucket_width_um}")
    if not records:
        return []
    distance = np.array([abs(r.true_z_um) for r in records])
    errors = _errors(records)
    n_buckets = int(np.floor(distance.max() / bucket_width_um)) + 1
    rows = []
    idx = np.floor(distance / bucket_width_um).astype(int)
    for k in range(n_buckets):
        sel = idx == k
        if sel.any():
            rows.append(BucketRow(
                lo_um=k * bucket_width_um,
                hi_um=(k + 1) * bucket_width_um,
                fe_mean_um=float(errors[sel].mean()),
                fe_std_um=float(errors[sel].std()),
                count=int(sel.sum()),
            ))
        else:
            rows.append(BucketRow(
                lo_um=k * bucket_width_um,
                hi_um=(k + 1) * bucket_width_um,
                fe_mean_um=float("nan"),
                fe_std_um=float("nan"),
                count=0,
            ))
    return rows


def buckets_to_csv(rows: list[BucketRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["bucket_lo_um", "bucket_hi_um", "fe_mean_um", "fe_std_um", "count"])
    for b in rows:
        writer.writerow([repr(b.lo_um), repr(b.hi_um), repr(b.fe_mean_um),
                         repr(b.fe_std_um), b.count])
    return buffer.getvalue()


@dataclass
class LabelOracle:
    """Stand-in model that answers with the true label plus optional noise.

    Used to exercise evaluation and scanning paths independently of any
    trained network.
    """

    noise_sigma: float = 0.0
    seed: int = 0

    def predict_from_labels(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.float64)
        if self.noise_sigma > 0:
            return labels + rng.normal(0.0, self.noise_sigma, size=labels.shape)
        return labels.copy()


def evaluate_model(
    model,
    manifest: DatasetManifest,
    aggregate: bool = True,
    dof_um: float | None = None,
    dataset_root=None,
    direction_epsilon: float = 0.0,
    bucket_width_um: float = 2.0,
    batch_size: int = 64,
) -> MetricsReport:
    """Predict over a manifest and compute the full metrics report.

    ``model`` is either a trained network exposing ``predict_batch`` (which
    requires ``dataset_root`` to load patches) or a :class:`LabelOracle`.
    With ``aggregate`` set, per-patch predictions are grouped by source
    image and reduced by their median before metrics are computed.
    """
    if len(manifest) == 0:
        raise MetricError("cannot evaluate an empty manifest")
    if dof_um is None:
        dof_um = manifest.dof_um
    entries = manifest.entries
    labels = manifest.labels()

    if hasattr(model, "predict_from_labels"):
        rng = np.random.default_rng(getattr(model, "seed", 0))
        preds = model.predict_from_labels(labels, rng)
    else:
        if dataset_root is None:
            raise ParameterError("dataset_root is required to evaluate a trained model")
        loader = PatchLoader(dataset_root, tile_size=model.config.input_size[0])
        chunks = []
        for i in range(0, len(entries), batch_size):
            batch = entries[i:i + batch_size]
            chunks.append(model.predict_batch(loader.load_batch(batch)))
        preds = np.concatenate(chunks)

    if aggregate:
        groups: dict[tuple, list[int]] = {}
        for i, entry in enumerate(entries):
            groups.setdefault(entry.image_id, []).append(i)
        records = [
            EvalRecord(
                true_z_um=float(labels[idx[0]]),
                pred_z_um=aggregate_prediction(preds[idx]),
                source_id=image_id,
                aggregated=True,
            )
            for image_id, idx in sorted(groups.items())
        ]
    else:
        records = [
            EvalRecord(
                true_z_um=float(labels[i]),
                pred_z_um=float(preds[i]),
                source_id=entries[i].source_id,
            )
            for i in range(len(entries))
        ]
    return metrics_from_records(
        records, dof_um, aggregated=aggregate,
        direction_epsilon=direction_epsilon, bucket_width_um=bucket_width_um,
    )


def metrics_from_records(
    records: list[EvalRecord],
    dof_um: float,
    aggregated: bool = False,
    direction_epsilon: float = 0.0,
    bucket_width_um: float = 2.0,
) -> MetricsReport:
    fe_mean, fe_std = compute_fe(records)
    try:
        fd = compute_fd(records, direction_epsilon)
    except DirectionUndefinedError:
        fd = None
    return MetricsReport(
        fe_mean_um=fe_mean,
        fe_std_um=fe_std,
        fd_rate=fd,
        dof_rate=compute_dof_rate(records, dof_um),
        n_records=len(records),
        dof_um=dof_um,
        aggregated=aggregated,
        direction_epsilon_um=direction_epsilon,
        buckets=error_vs_distance_report(records, bucket_width_um),
    )
