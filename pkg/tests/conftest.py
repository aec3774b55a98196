import numpy as np
import pytest

from slidefocus.dataset import (
    DatasetManifest,
    ManifestEntry,
    build_dataset,
    save_manifest,
    tile_grid,
    write_header,
)
from slidefocus.optics import (
    OpticsConfig,
    Region,
    generate_slide,
    optics_hash,
    save_stack,
    synthesize_stack,
)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """5 slides x 9 slices, one 224x224 field of view each, saved to disk."""
    root = tmp_path_factory.mktemp("small_dataset")
    cfg = OpticsConfig(dof_um=4.0)
    stacks = []
    for i in range(5):
        slide = generate_slide(1000 + i, (384, 384), 0.75, focal_amplitude_um=2.0)
        stack = synthesize_stack(
            slide, Region(80, 80, 224, 224), 9, 12.0, cfg,
            slide_id=f"s{i:02d}", fov_id="f0",
        )
        save_stack(stack, root / f"s{i:02d}_f0")
        stacks.append(stack)
    train, val, test = build_dataset(stacks, 224, split_seed=3, test_slides=1)
    for manifest, name in ((train, "train"), (val, "val"), (test, "test")):
        save_manifest(manifest, root / f"{name}.jsonl")
    write_header(root, {
        "dof_um": 4.0,
        "tile_size": 224,
        "z_range_um": 12.0,
        "slice_spacing_um": 3.0,
        "optics": cfg.to_dict(),
        "optics_hash": optics_hash(cfg),
        "n_slides": 5,
    })
    return {"root": root, "train": train, "val": val, "test": test, "optics": cfg}


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """~200 tiny 64 px patches from one slide, for fast optimization tests."""
    root = tmp_path_factory.mktemp("micro_dataset")
    cfg = OpticsConfig(dof_um=4.0)
    slide = generate_slide(77, (384, 384), 0.9, focal_amplitude_um=0.0)
    stack = synthesize_stack(
        slide, Region(64, 64, 256, 256), 13, 12.0, cfg, slide_id="m0", fov_id="f0"
    )
    save_stack(stack, root / "m0_f0")
    entries = []
    for i, z in enumerate(stack.z_offsets_um):
        for origin in tile_grid((256, 256), 64):
            entries.append(ManifestEntry(
                image_path=stack.slice_paths[i],
                z_label_um=float(z),
                slide_id="m0",
                fov_id="f0",
                slice_idx=i,
                tile_xy=origin,
            ))
    rng = np.random.default_rng(5)
    order = rng.permutation(len(entries))
    train = DatasetManifest([entries[i] for i in order[:200]], "train", 4.0)
    val = DatasetManifest([entries[i] for i in order[200:216]], "val", 4.0)
    return {"root": root, "train": train, "val": val}
