"""Command-line front end: synth | train | eval | ablate | scan.

Every command resolves its configuration from built-in defaults, an optional
``--config file.json``, and explicit flags (in that order of precedence),
writes the resolved snapshot to ``<out>/config.json``, and emits only
machine-readable artifacts plus matplotlib renderings of them. Outputs are a
pure function of (resolved config, seed).

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import optics as op
from . import reporting, scanner
from . import training as tr
from .errors import ConfigurationError, ParameterError, SlideFocusError, WeightLoadError
from .network import FocusModel, ModelConfig, export_weights, load_weights


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


SYNTH_DEFAULTS = {
    "seed": 0,
    "slides": 12,
    "slide_size": 576,
    "tissue_fraction": 0.75,
    "focal_amplitude_um": 5.0,
    "fov": 448,
    "stack_slices": 21,
    "z_range_um": 20.0,
    "dof_um": 4.0,
    "blur_gain_k": 0.5,
    "chroma_offset_um": None,  # defaults to 0.05 * z_range
    "noise_sigma": 0.01,
    "tile_size": 224,
    "test_slides": 2,
}

TRAIN_DEFAULTS = {
    "seed": 0,
    "variant": "spatiospectral",
    "base_channels": 48,
    "epochs": 100,
    "batch_size": 32,
    "learning_rate": 8e-4,
    "weight_decay": 0.006,
    "smooth_l1_beta": 0.1,
    "augment": True,
    "threads": None,
}

EVAL_DEFAULTS = {
    "seed": 0,
    "split": "test",
    "aggregate": True,
    "dof_um": None,
    "bucket_width_um": 2.0,
    "direction_epsilon_um": None,  # defaults to half the slice spacing
    "oracle": False,
    "model": None,
    "threads": None,
}

SCAN_DEFAULTS = {
    "seed": 0,
    "slide_seed": 100,
    "slide_height": 1440,
    "slide_width": 2560,
    "tissue_fraction": 0.7,
    "focal_amplitude_um": 5.0,
    "tau": 0.9,
    "desk_scale": 0.5,
    "tile_size": 224,
    "initial_z_um": 0.0,
    "z_precision_um": 2.0,
    "dof_um": None,
    "oracle": False,
    "model": None,
    "dof_noise_sigma": None,
    "blur_gain_k": 0.5,
    "chroma_offset_um": 1.0,
    "noise_sigma": 0.01,
    "threads": None,
}

ABLATE_DEFAULTS = {k: v for k, v in TRAIN_DEFAULTS.items() if k != "variant"}
ABLATE_DEFAULTS["variants"] = ["spatial", "spectral", "spatiospectral"]


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        file_cfg = json.loads(path.read_text())
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, command: str, cfg: dict) -> None:
    snapshot = {"command": command, **cfg}
    (out / "config.json").write_text(json.dumps(snapshot, sort_keys=True, indent=2) + "\n")


def _set_threads(cfg: dict) -> None:
    if cfg.get("threads"):
        import torch

        torch.set_num_threads(int(cfg["threads"]))


def _slide_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def _best_fov(slide: op.VirtualSlide, fov: int, margin: int) -> op.Region:
    """Deterministically pick the candidate window with the most tissue."""
    h, w = slide.size_px
    lo_r, hi_r = margin, h - fov - margin
    lo_c, hi_c = margin, w - fov - margin
    if hi_r < lo_r or hi_c < lo_c:
        raise ConfigurationError(f"slide {h}x{w} too small for fov {fov} with margin {margin}")
    best = None
    for r0 in np.linspace(lo_r, hi_r, 3).astype(int):
        for c0 in np.linspace(lo_c, hi_c, 3).astype(int):
            region = op.Region(int(r0), int(c0), fov, fov)
            frac = slide.tissue_mask[region.row0:region.row1, region.col0:region.col1].mean()
            if best is None or frac > best[0]:
                best = (frac, region)
    return best[1]


def cmd_synth(args) -> int:
    cfg = _resolve(args, SYNTH_DEFAULTS)
    if cfg["slides"] < 3:
        raise ConfigurationError(f"need at least 3 slides, got {cfg['slides']}")
    out = _out_dir(args)
    if cfg["chroma_offset_um"] is None:
        cfg["chroma_offset_um"] = 0.05 * cfg["z_range_um"]
    _write_config(out, "synth", cfg)

    optics_cfg = op.OpticsConfig(
        dof_um=cfg["dof_um"],
        blur_gain_k=cfg["blur_gain_k"],
        chroma_offset_um=cfg["chroma_offset_um"],
        noise_sigma=cfg["noise_sigma"],
        seed=cfg["seed"],
    )
    margin = int(np.ceil(4.0 * optics_cfg.blur_gain_k
                         * (cfg["z_range_um"] + optics_cfg.chroma_offset_um
                            + cfg["focal_amplitude_um"]))) // 2
    margin = min(margin, (cfg["slide_size"] - cfg["fov"]) // 2)

    stacks = []
    for i in range(cfg["slides"]):
        slide_id = f"slide_{i:03d}"
        slide = op.generate_slide(
            _slide_seed(cfg["seed"], i),
            (cfg["slide_size"], cfg["slide_size"]),
            cfg["tissue_fraction"],
            focal_amplitude_um=cfg["focal_amplitude_um"],
        )
        op.save_slide(slide, out / "slides" / slide_id)
        fov = _best_fov(slide, cfg["fov"], max(margin, 0))
        stack = op.synthesize_stack(
            slide, fov, cfg["stack_slices"], cfg["z_range_um"], optics_cfg,
            slide_id=slide_id, fov_id="f0",
        )
        op.save_stack(stack, out / f"{slide_id}_f0")
        stacks.append(stack)

    manifests = ds.build_dataset(
        stacks, cfg["tile_size"], split_seed=cfg["seed"], test_slides=cfg["test_slides"]
    )
    for manifest in manifests:
        ds.save_manifest(manifest, out / f"{manifest.split}.jsonl")
    spacing = 2.0 * cfg["z_range_um"] / (cfg["stack_slices"] - 1)
    ds.write_header(out, {
        "dof_um": cfg["dof_um"],
        "tile_size": cfg["tile_size"],
        "z_range_um": cfg["z_range_um"],
        "slice_spacing_um": spacing,
        "n_slides": cfg["slides"],
        "n_stacks": len(stacks),
        "optics": optics_cfg.to_dict(),
        "optics_hash": op.optics_hash(optics_cfg),
        "splits": {m.split: len(m) for m in manifests},
    })
    train_m, val_m, test_m = manifests
    print(
        f"slides={cfg['slides']} stacks={len(stacks)} "
        f"patches train={len(train_m)} val={len(val_m)} test={len(test_m)}"
    )
    return 0


def _load_split(root: Path, split: str) -> ds.DatasetManifest:
    path = root / f"{split}.jsonl"
    if not path.exists():
        raise ConfigurationError(f"no {split} manifest under {root}")
    return ds.load_manifest(path, split=split)


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    out = _out_dir(args)
    _write_config(out, "train", cfg)
    _set_threads(cfg)
    data_root = Path(args.data)
    header = ds.read_header(data_root)
    if header is None:
        raise ConfigurationError(f"{data_root} is not a dataset root (no dataset.json)")
    train_manifest = _load_split(data_root, "train")
    val_manifest = _load_split(data_root, "val")

    model = FocusModel.create(
        ModelConfig(variant=cfg["variant"], base_channels=cfg["base_channels"]),
        seed=cfg["seed"],
    )
    augmentations = tr.default_augmentations() if cfg["augment"] else list(tr.NORMALIZE_ONLY)
    train_cfg = tr.TrainConfig(
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        weight_decay=cfg["weight_decay"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        smooth_l1_beta=cfg["smooth_l1_beta"],
        augmentations=augmentations,
    )
    best, history = tr.train(
        model, train_manifest, val_manifest, train_cfg, data_root,
        log=lambda line: print(line, file=sys.stderr),
    )
    model.meta = {
        "dof_um": header["dof_um"],
        "z_range_um": header.get("z_range_um"),
        "slice_spacing_um": header.get("slice_spacing_um"),
        "optics": header.get("optics"),
        "train_seed": cfg["seed"],
    }
    (out / "history.csv").write_text(tr.history_to_csv(history))
    if history:
        reporting.save_history_plot(history, out / "history.png")
    latest_state = {k: v.detach().clone() for k, v in model.net.state_dict().items()}
    tr.restore_checkpoint(model, best)
    export_weights(model, out / "best.weights")
    model.net.load_state_dict(latest_state)
    export_weights(model, out / "latest.weights")
    (out / "checkpoint.json").write_text(json.dumps({
        "best": "best.weights",
        "latest": "latest.weights",
        "best_epoch": best.epoch,
        "best_val_fe_um": best.val_fe_um,
        "epochs_run": len(history),
    }, sort_keys=True, indent=2) + "\n")
    print(f"best_epoch={best.epoch} val_fe_um={best.val_fe_um:.4f} "
          f"params={model.parameter_count()}")
    return 0


def _load_model(cfg: dict):
    if cfg["oracle"]:
        return ev.LabelOracle(seed=cfg["seed"])
    if not cfg["model"]:
        raise ConfigurationError("provide --model PATH or --oracle")
    return load_weights(cfg["model"])


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    out = _out_dir(args)
    _write_config(out, "eval", cfg)
    _set_threads(cfg)
    data_root = Path(args.data)
    header = ds.read_header(data_root) or {}
    manifest = _load_split(data_root, cfg["split"])

    model = _load_model(cfg)
    dof_um = cfg["dof_um"]
    if dof_um is None:
        dof_um = manifest.dof_um
    trained_dof = getattr(model, "meta", {}).get("dof_um") if not cfg["oracle"] else None
    if trained_dof is not None and abs(trained_dof - dof_um) > 1e-9:
        print(
            f"warning: checkpoint trained at DoF {trained_dof} um but manifest has "
            f"{dof_um} um; proceeding with the manifest value",
            file=sys.stderr,
        )
    epsilon = cfg["direction_epsilon_um"]
    if epsilon is None:
        epsilon = float(header.get("slice_spacing_um", 0.0)) / 2.0

    report = ev.evaluate_model(
        model, manifest,
        aggregate=cfg["aggregate"],
        dof_um=dof_um,
        dataset_root=data_root,
        direction_epsilon=epsilon,
        bucket_width_um=cfg["bucket_width_um"],
    )
    (out / "metrics.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    )
    (out / "error_vs_distance.csv").write_text(ev.buckets_to_csv(report.buckets))
    if report.buckets:
        reporting.save_error_vs_distance_plot(report.buckets, out / "error_vs_distance.png")
    print(report.summary_line())
    return 0


def cmd_scan(args) -> int:
    cfg = _resolve(args, SCAN_DEFAULTS)
    out = _out_dir(args)
    _write_config(out, "scan", cfg)
    _set_threads(cfg)
    model = _load_model(cfg)

    meta_optics = getattr(model, "meta", {}).get("optics") if not cfg["oracle"] else None
    if meta_optics:
        optics_cfg = op.OpticsConfig(**{**meta_optics, "seed": cfg["seed"]})
    else:
        optics_cfg = op.OpticsConfig(
            dof_um=cfg["dof_um"] if cfg["dof_um"] is not None else 4.0,
            blur_gain_k=cfg["blur_gain_k"],
            chroma_offset_um=cfg["chroma_offset_um"],
            noise_sigma=cfg["noise_sigma"],
            seed=cfg["seed"],
        )
    slide = op.generate_slide(
        cfg["slide_seed"],
        (cfg["slide_height"], cfg["slide_width"]),
        cfg["tissue_fraction"],
        focal_amplitude_um=cfg["focal_amplitude_um"],
    )
    scan_cfg = scanner.ScanConfig(
        tau=cfg["tau"],
        desk_scale=cfg["desk_scale"],
        tile_size=cfg["tile_size"],
        dof_um=cfg["dof_um"],
        initial_z_um=cfg["initial_z_um"],
        z_precision_um=cfg["z_precision_um"],
    )
    slide_id = f"slide_{cfg['slide_seed']:05d}"
    report = scanner.scan_slide(
        slide, scan_cfg, model, optics_cfg,
        out_dir=out / "captures", slide_id=slide_id,
    )
    scanner.save_report(report, out)
    reporting.save_scan_map(report, out / "scan_map.png")
    print(report.summary_line())
    return 0 if report.complete else 2


def cmd_ablate(args) -> int:
    cfg = _resolve(args, ABLATE_DEFAULTS)
    out = _out_dir(args)
    _write_config(out, "ablate", cfg)
    _set_threads(cfg)
    data_root = Path(args.data)
    rows = []
    for variant in cfg["variants"]:
        sub = argparse.Namespace(
            out=str(out / variant), data=args.data, config=None,
            **{k: cfg[k] for k in TRAIN_DEFAULTS if k != "variant"},
            variant=variant,
        )
        code = cmd_train(sub)
        if code != 0:
            return code
        model = load_weights(out / variant / "best.weights")
        header = ds.read_header(data_root) or {}
        manifest = _load_split(data_root, "test")
        epsilon = float(header.get("slice_spacing_um", 0.0)) / 2.0
        report = ev.evaluate_model(
            model, manifest, aggregate=True, dof_um=manifest.dof_um,
            dataset_root=data_root, direction_epsilon=epsilon,
        )
        rows.append({
            "variant": variant,
            "params": model.parameter_count(),
            "fd_pct": "" if report.fd_rate is None else repr(100.0 * report.fd_rate),
            "dof_pct": repr(100.0 * report.dof_rate),
            "fe_mean_um": repr(report.fe_mean_um),
            "fe_std_um": repr(report.fe_std_um),
        })
        print(f"{variant}: {report.summary_line()}")
    lines = ["variant,params,fd_pct,dof_pct,fe_mean_um,fe_std_um"]
    lines += [
        f"{r['variant']},{r['params']},{r['fd_pct']},{r['dof_pct']},"
        f"{r['fe_mean_um']},{r['fe_std_um']}"
        for r in rows
    ]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    reporting.save_ablation_plot(rows, out / "ablation.png")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="slidefocus", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_data=False):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON file with base parameters")
        p.add_argument("--seed", type=int)
        if needs_data:
            p.add_argument("--data", required=True, help="dataset root from `synth`")

    p = sub.add_parser("synth", help="generate slides, stacks, and manifests")
    add_common(p)
    p.add_argument("--slides", type=int)
    p.add_argument("--slide-size", dest="slide_size", type=int)
    p.add_argument("--tissue-fraction", dest="tissue_fraction", type=float)
    p.add_argument("--focal-amplitude-um", dest="focal_amplitude_um", type=float)
    p.add_argument("--fov", type=int)
    p.add_argument("--stack-slices", dest="stack_slices", type=int)
    p.add_argument("--z-range-um", dest="z_range_um", type=float)
    p.add_argument("--dof-um", dest="dof_um", type=float)
    p.add_argument("--blur-gain-k", dest="blur_gain_k", type=float)
    p.add_argument("--chroma-offset-um", dest="chroma_offset_um", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--tile-size", dest="tile_size", type=int)
    p.add_argument("--test-slides", dest="test_slides", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a focus model on a dataset")
    add_common(p, needs_data=True)
    p.add_argument("--variant", choices=["spatial", "spectral", "spatiospectral"])
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--smooth-l1-beta", dest="smooth_l1_beta", type=float)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute FE/FD/DoF metrics for a checkpoint")
    add_common(p, needs_data=True)
    p.add_argument("--model", help="weight file from `train`")
    p.add_argument("--oracle", action=argparse.BooleanOptionalAction, default=None,
                   help="evaluate the label oracle instead of a checkpoint")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--aggregate", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--dof-um", dest="dof_um", type=float)
    p.add_argument("--bucket-width-um", dest="bucket_width_um", type=float)
    p.add_argument("--direction-epsilon-um", dest="direction_epsilon_um", type=float)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all three variants")
    add_common(p, needs_data=True)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--smooth-l1-beta", dest="smooth_l1_beta", type=float)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("scan", help="scan a generated slide with a focus model")
    add_common(p)
    p.add_argument("--model")
    p.add_argument("--oracle", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--slide-seed", dest="slide_seed", type=int)
    p.add_argument("--slide-height", dest="slide_height", type=int)
    p.add_argument("--slide-width", dest="slide_width", type=int)
    p.add_argument("--tissue-fraction", dest="tissue_fraction", type=float)
    p.add_argument("--focal-amplitude-um", dest="focal_amplitude_um", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--desk-scale", dest="desk_scale", type=float)
    p.add_argument("--tile-size", dest="tile_size", type=int)
    p.add_argument("--initial-z-um", dest="initial_z_um", type=float)
    p.add_argument("--z-precision-um", dest="z_precision_um", type=float)
    p.add_argument("--dof-um", dest="dof_um", type=float)
    p.add_argument("--blur-gain-k", dest="blur_gain_k", type=float)
    p.add_argument("--chroma-offset-um", dest="chroma_offset_um", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_scan)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigurationError, ParameterError, WeightLoadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SlideFocusError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
