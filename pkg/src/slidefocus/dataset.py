"""Patch datasets: tiling, manifests, slide-level splits, and aggregation.

A dataset lives in a root directory holding stack images (PNG slices), a
``dataset.json`` header and one JSON-Lines manifest per split. Each manifest
row describes a single training patch: the slice image it comes from, the
tile window inside that image, and the signed defocus label in micrometers
(positive = stage above the optimal plane).
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AggregationError, ConfigurationError, ParameterError
from .optics import FocalStack, load_png

TILE_SIZE = 224
VAL_FRACTION = 0.2


@dataclass(frozen=True)
class ManifestEntry:
    """One patch: a tile window into a stored slice image plus its label."""

    image_path: str
    z_label_um: float
    slide_id: str
    fov_id: str
    slice_idx: int
    tile_xy: tuple[int, int]  # (row0, col0) of the tile window

    @property
    def source_id(self) -> tuple:
        return (self.slide_id, self.fov_id, self.slice_idx, self.tile_xy)

    @property
    def image_id(self) -> tuple:
        """Identity of the underlying image (all tiles of one slice share it)."""
        return (self.slide_id, self.fov_id, self.slice_idx)

    def to_json(self) -> str:
        row = {
            "image_path": self.image_path,
            "z_label_um": self.z_label_um,
            "slide_id": self.slide_id,
            "fov_id": self.fov_id,
            "slice_idx": self.slice_idx,
            "tile_xy": list(self.tile_xy),
        }
        return json.dumps(row, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "ManifestEntry":
        row = json.loads(line)
        return ManifestEntry(
            image_path=row["image_path"],
            z_label_um=float(row["z_label_um"]),
            slide_id=row["slide_id"],
            fov_id=row["fov_id"],
            slice_idx=int(row["slice_idx"]),
            tile_xy=tuple(row["tile_xy"]),
        )


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: str
    dof_um: float
    magnification_tag: str = "desk-sim"

    def slide_ids(self) -> set[str]:
        return {e.slide_id for e in self.entries}

    def labels(self) -> np.ndarray:
        return np.array([e.z_label_um for e in self.entries], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.entries)


def tile_image(
    image: np.ndarray, tile_size: int, keep_partial: bool = False
) -> list[tuple[tuple[int, int], np.ndarray]]:
    """Cut a non-overlapping tile grid from the top-left corner.

    Returns ``((row0, col0), tile)`` pairs in row-major order. Partial edge
    tiles are dropped unless ``keep_partial`` is set; an image smaller than
    one tile yields an empty list.
    """
    if tile_size < 32:
        raise ParameterError(f"tile_size must be >= 32, got {tile_size}")
    h, w = image.shape[:2]
    tiles = []
    for r0 in range(0, h, tile_size):
        for c0 in range(0, w, tile_size):
            r1, c1 = r0 + tile_size, c0 + tile_size
            if r1 > h or c1 > w:
                if not keep_partial:
                    continue
                r1, c1 = min(r1, h), min(c1, w)
            tiles.append(((r0, c0), image[r0:r1, c0:c1]))
    return tiles


def tile_grid(shape: tuple[int, int], tile_size: int) -> list[tuple[int, int]]:
    """Tile origins for a full grid (no partial tiles) on an image shape."""
    h, w = shape
    return [
        (r0, c0)
        for r0 in range(0, h - tile_size + 1, tile_size)
        for c0 in range(0, w - tile_size + 1, tile_size)
    ]


def split_slides(
    slide_ids: list[str], split_seed: int, test_slides: int | None = None
) -> tuple[list[str], list[str], list[str]]:
    """Deterministic slide-level split: held-out test slides, then 80/20.

    Splitting happens at slide granularity so no field of view leaks between
    splits. ``test_slides`` defaults to about one slide in six (at least one).
    """
    unique = sorted(set(slide_ids))
    n = len(unique)
    if n < 3:
        raise ConfigurationError(f"need at least 3 distinct slides, got {n}")
    if test_slides is None:
        test_slides = max(1, n // 6)
    if test_slides < 0 or test_slides > n - 2:
        raise ConfigurationError(
            f"test_slides={test_slides} leaves no room for train/val among {n} slides"
        )
    order = list(np.random.default_rng(split_seed).permutation(unique))
    test = sorted(order[:test_slides])
    remaining = order[test_slides:]
    n_val = max(1, round(VAL_FRACTION * len(remaining)))
    if len(remaining) - n_val < 1:
        raise ConfigurationError("split leaves an empty training set")
    val = sorted(remaining[:n_val])
    train = sorted(remaining[n_val:])
    return train, val, test


def build_dataset(
    stacks: list[FocalStack],
    tile_size: int = TILE_SIZE,
    split_seed: int = 0,
    test_slides: int | None = None,
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Turn focal stacks into (train, val, test) patch manifests.

    Patch labels are copied from the stack offsets. Stacks must have been
    saved (``save_stack``) for the manifests to reference real files;
    unsaved stacks get placeholder paths, which is fine for split logic.
    """
    if not stacks:
        raise ConfigurationError("no stacks given")
    dof_values = {s.optics.dof_um for s in stacks}
    if len(dof_values) > 1:
        raise ConfigurationError(f"stacks mix depth-of-field values: {sorted(dof_values)}")
    dof_um = dof_values.pop()

    train_ids, val_ids, test_ids = split_slides(
        [s.slide_id for s in stacks], split_seed, test_slides
    )
    assignment = {sid: "train" for sid in train_ids}
    assignment.update({sid: "val" for sid in val_ids})
    assignment.update({sid: "test" for sid in test_ids})

    buckets: dict[str, list[ManifestEntry]] = {"train": [], "val": [], "test": []}
    for stack in sorted(stacks, key=lambda s: (s.slide_id, s.fov_id)):
        split = assignment[stack.slide_id]
        shape = stack.images[0].shape[:2]
        origins = tile_grid(shape, tile_size)
        for i, z in enumerate(stack.z_offsets_um):
            if stack.slice_paths is not None:
                path = stack.slice_paths[i]
            else:
                path = f"{stack.slide_id}/{stack.fov_id}/slice_{i:04d}.png"
            for origin in origins:
                buckets[split].append(
                    ManifestEntry(
                        image_path=path,
                        z_label_um=float(z),
                        slide_id=stack.slide_id,
                        fov_id=stack.fov_id,
                        slice_idx=i,
                        tile_xy=origin,
                    )
                )
    return tuple(
        DatasetManifest(entries=buckets[name], split=name, dof_um=dof_um)
        for name in ("train", "val", "test")
    )


def aggregate_prediction(patch_predictions) -> float:
    """Median of per-patch predictions; even counts average the middle pair."""
    values = np.asarray(list(patch_predictions), dtype=np.float64)
    if values.size == 0:
        raise AggregationError("cannot aggregate an empty prediction list")
    return float(np.median(values))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [e.to_json() for e in manifest.entries]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_manifest(
    path: Path | str, split: str | None = None, dof_um: float | None = None
) -> DatasetManifest:
    path = Path(path)
    if split is None:
        split = path.stem
    entries = [
        ManifestEntry.from_json(line)
        for line in path.read_text().splitlines()
        if line.strip()
    ]
    if dof_um is None:
        header = read_header(path.parent)
        dof_um = float(header["dof_um"]) if header else 0.0
    return DatasetManifest(entries=entries, split=split, dof_um=dof_um)


def write_header(root: Path | str, header: dict) -> None:
    (Path(root) / "dataset.json").write_text(
        json.dumps(header, sort_keys=True, indent=2) + "\n"
    )


def read_header(root: Path | str) -> dict | None:
    path = Path(root) / "dataset.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


class PatchLoader:
    """Loads manifest patches, caching decoded slice images.

    Slice PNGs are shared by several tiles, so decoded images are kept in a
    small LRU cache keyed by path.
    """

    def __init__(self, root: Path | str, tile_size: int = TILE_SIZE, cache_size: int = 64):
        self.root = Path(root)
        self.tile_size = tile_size
        self.cache_size = cache_size
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()

    def _image(self, rel_path: str) -> np.ndarray:
        if rel_path in self._cache:
            self._cache.move_to_end(rel_path)
            return self._cache[rel_path]
        img = load_png(self.root / rel_path)
        self._cache[rel_path] = img
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return img

    def load(self, entry: ManifestEntry) -> np.ndarray:
        img = self._image(entry.image_path)
        r0, c0 = entry.tile_xy
        ts = self.tile_size
        tile = img[r0:r0 + ts, c0:c0 + ts]
        if tile.shape[:2] != (ts, ts):
            raise ParameterError(
                f"tile {entry.tile_xy} of {entry.image_path} is {tile.shape[:2]}, "
                f"expected {(ts, ts)}"
            )
        return tile

    def load_batch(self, entries: list[ManifestEntry]) -> np.ndarray:
        return np.stack([self.load(e) for e in entries])


@dataclass
class PatchSample:
    """An in-memory patch: image tile plus its signed defocus label."""

    image: np.ndarray
    z_label_um: float
    source_id: tuple = field(default=())
