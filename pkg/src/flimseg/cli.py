"""Command-line entry point orchestrating every pipeline stage.

Subcommands: phantom gen, flim estimate, msflim grid, encoder build, train,
eval, compare, serve. Every run writes a run_manifest.json next to its
outputs with the fully resolved configuration and seeds. Exit codes:
0 success, 2 usage error, 1 runtime error.

Configuration precedence: command-line flags > --config JSON file > defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, sunet
from .data import Dataset
from .encoder import (
    EncoderSpec,
    LayerSpec,
    build_encoder,
    estimate_layer_filters,
    load_bank,
    load_encoder,
    save_bank,
    save_encoder,
)
from .metrics import evaluate, write_report_csv
from .msflim import (
    ORACLE_TAU,
    RunParams,
    activation_map,
    finalize_bank,
    oracle_select,
    run_msflim_step,
)
from .patches import concat_datasets, extract_patches, marker_stats_pooled
from .phantom import PhantomSpec, generate_dataset
from .volume import slice2d
from . import report

MODALITY_KEYS = {"FLAIR": "flair", "T1Gd": "t1gd"}
# regions the selection must cover, and the extra ones it may also represent
ORACLE_COVERAGE = {"FLAIR": ("ed_saturated", "ed_intermediate"), "T1Gd": ("et", "nc")}
ORACLE_SCORED = {
    "FLAIR": ("ed_saturated", "ed_intermediate", "healthy"),
    "T1Gd": ("et", "nc", "healthy"),
}


class UsageError(Exception):
    """Bad flag combination; maps to exit code 2."""


def _write_manifest(out_dir: Path, command: str, config: dict, inputs, outputs,
                    started: float) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "wall_time_s": round(time.time() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "run_manifest.json.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, out_dir / "run_manifest.json")


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults."""
    file_config = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            file_config = json.load(fh)
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_config:
            resolved[key] = file_config[key]
        else:
            resolved[key] = default
    return resolved


def _parse_grid(text: str) -> list[tuple[int, int]]:
    pairs = []
    for token in text.split(","):
        a, _, b = token.strip().partition("x")
        pairs.append((int(a), int(b)))
    return pairs


def _parse_widths(text) -> tuple[int, int, int]:
    if isinstance(text, (list, tuple)):
        return tuple(int(w) for w in text)
    return tuple(int(w) for w in text.split(","))


def _encoder_spec(widths, clusters: int) -> EncoderSpec:
    return EncoderSpec(
        layers=tuple(LayerSpec(clusters_per_marker=clusters, pca_out=w) for w in widths)
    )


def cmd_phantom_gen(args) -> int:
    started = time.time()
    cfg = _resolve(args, {
        "n": 30, "size": 48, "seed": 7, "split": "0.7,0.1,0.2", "marked": 8,
        "marker_voxels": 30, "level_jitter": None, "noise_sigma": None,
    })
    out = Path(args.out)
    split = tuple(float(f) for f in str(cfg["split"]).split(","))
    spec_kwargs = {"size": cfg["size"], "seed": cfg["seed"]}
    if cfg["level_jitter"] is not None:
        spec_kwargs["level_jitter"] = cfg["level_jitter"]
    if cfg["noise_sigma"] is not None:
        spec_kwargs["noise_sigma"] = cfg["noise_sigma"]
    spec = PhantomSpec(**spec_kwargs)
    manifest = generate_dataset(
        spec, cfg["n"], out, split=split,
        marked_train=cfg["marked"], per_region_voxels=cfg["marker_voxels"],
    )
    ds = Dataset(out)
    sample = ds.load_case(manifest["cases"][0])
    report.save_case_montage(sample.flair, sample.t1gd, sample.labels, out / "montage.png")
    _write_manifest(out, "phantom gen", cfg, [], [out], started)
    print(f"wrote {cfg['n']} cases to {out} "
          f"(train {len(manifest['train'])}/val {len(manifest['val'])}/test {len(manifest['test'])})")
    return 0


def cmd_flim_estimate(args) -> int:
    started = time.time()
    cfg = _resolve(args, {"modality": "FLAIR", "clusters": 5, "pca": 16, "kernel": 3, "seed": 0})
    ds = Dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volumes, markers = ds.marked_inputs(cfg["modality"])
    stats = marker_stats_pooled(volumes, markers)
    pd = concat_datasets(
        [extract_patches(v, m, cfg["kernel"], stats) for v, m in zip(volumes, markers)]
    )
    bank = estimate_layer_filters(
        pd, stats, cfg["clusters"], pca_out=cfg["pca"], seed=cfg["seed"]
    )
    bank_path = out / f"bank_{MODALITY_KEYS[cfg['modality']]}.fb"
    save_bank(bank, bank_path)
    _write_manifest(out, "flim estimate", cfg, [args.data], [bank_path], started)
    print(f"estimated {len(bank)} first-layer filters -> {bank_path}")
    return 0


def cmd_msflim_grid(args) -> int:
    started = time.time()
    cfg = _resolve(args, {
        "grid": "5x5,5x20,5x50,10x5,10x20,10x50", "target": 16,
        "tau": ORACLE_TAU, "kernel": 3, "seed": 0,
    })
    ds = Dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = _parse_grid(cfg["grid"])
    outputs = []
    for modality in ("FLAIR", "T1Gd"):
        volumes, markers = ds.marked_inputs(modality)
        stats = marker_stats_pooled(volumes, markers)
        seeds = np.random.SeedSequence(cfg["seed"]).generate_state(len(grid))
        runs = [
            run_msflim_step(
                volumes, markers,
                RunParams(n1, n2, seed=int(s), kernel=cfg["kernel"]),
                run_id=f"{modality.lower()}-{n1}x{n2}", stats=stats,
            )
            for (n1, n2), s in zip(grid, seeds)
        ]
        images = {ms.image_id: v for v, ms in zip(volumes, markers)}
        regions = {
            cid: {name: masks[name] for name in ORACLE_SCORED[modality]}
            for cid in images
            for masks in [ds.load_regions(cid)]
        }
        ledger = oracle_select(runs, images, regions, target_bank_size=cfg["target"],
                               tau=cfg["tau"],
                               coverage_regions=ORACLE_COVERAGE[modality])
        bank = finalize_bank(runs, ledger, stats)
        bank_path = out / f"bank_{MODALITY_KEYS[modality]}.fb"
        save_bank(bank, bank_path)
        with open(out / f"ledger_{MODALITY_KEYS[modality]}.json", "w", encoding="utf-8") as fh:
            json.dump(ledger.to_dict(), fh, indent=2)
            fh.write("\n")
        tiles = []
        for run_id, image_id, index in ledger.chosen:
            cs = next(r for r in runs if r.run_id == run_id)
            act = activation_map(images[image_id], cs.get(image_id, index), stats)
            mid = act.spatial_shape[0] // 2
            tiles.append((f"{run_id} {image_id}#{index}", slice2d(act, "z", mid)))
        gallery = out / f"gallery_{MODALITY_KEYS[modality]}.png"
        report.save_activation_gallery(tiles, gallery)
        outputs += [bank_path, gallery]
        print(f"{modality}: selected {len(bank)} filters from {sum(len(r) for r in runs)} candidates")
    _write_manifest(out, "msflim grid", cfg, [args.data], outputs, started)
    return 0


def cmd_encoder_build(args) -> int:
    started = time.time()
    cfg = _resolve(args, {
        "widths": "16,32,64", "clusters": 5, "seed": 0,
        "bank_flair": None, "bank_t1gd": None,
    })
    ds = Dataset(args.data)
    out = Path(args.out)
    widths = _parse_widths(cfg["widths"])
    outputs = []
    for modality in ("FLAIR", "T1Gd"):
        volumes, markers = ds.marked_inputs(modality)
        bank_path = cfg[f"bank_{MODALITY_KEYS[modality]}"]
        layer1 = load_bank(bank_path) if bank_path else None
        spec = _encoder_spec(widths, cfg["clusters"])
        if layer1 is not None and len(layer1) != widths[0]:
            spec = _encoder_spec((len(layer1),) + tuple(widths[1:]), cfg["clusters"])
        model = build_encoder(volumes, markers, spec, layer1_bank=layer1, seed=cfg["seed"])
        enc_dir = out / f"encoder_{MODALITY_KEYS[modality]}"
        save_encoder(model, enc_dir)
        outputs.append(enc_dir)
        print(f"{modality}: encoder widths {[len(b) for b in model.banks]} -> {enc_dir}")
    _write_manifest(out, "encoder build", cfg, [args.data], outputs, started)
    return 0


def _load_encoders(path) -> dict:
    root = Path(path)
    return {
        "FLAIR": load_encoder(root / "encoder_flair"),
        "T1Gd": load_encoder(root / "encoder_t1gd"),
    }


def cmd_train(args) -> int:
    started = time.time()
    cfg = _resolve(args, {
        "regime": None, "init": None, "encoders": None, "epochs": 100,
        "lr": 2.5e-3, "seed": 0, "widths": "16,32,64", "clusters": 5, "split": "train",
    })
    regime, init = cfg["regime"], cfg["init"]
    if regime not in ("fbp", "pbp", "ft"):
        raise UsageError(f"--regime must be fbp|pbp|ft, got {regime!r}")
    if init not in ("random", "flim", "bank"):
        raise UsageError(f"--init must be random|flim|bank, got {init!r}")
    if regime in ("pbp", "ft") and init == "random":
        raise UsageError(f"--regime {regime} needs a marker-estimated encoder, not --init random")
    if regime == "fbp" and init != "random":
        raise UsageError("--regime fbp trains from random init; use --init random")
    if init == "bank" and not cfg["encoders"]:
        raise UsageError("--init bank requires --encoders DIR")

    ds = Dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if init == "random":
        config = sunet.SunetConfig(encoder_widths=_parse_widths(cfg["widths"]))
        model = sunet.init_plain_model(config, seed=cfg["seed"])
    elif init == "bank":
        model = sunet.init_flim_model(_load_encoders(cfg["encoders"]), seed=cfg["seed"])
    else:  # on-the-fly standard estimation from the dataset's marked cases
        widths = _parse_widths(cfg["widths"])
        encoders = {}
        for modality in ("FLAIR", "T1Gd"):
            volumes, markers = ds.marked_inputs(modality)
            encoders[modality] = build_encoder(
                volumes, markers, _encoder_spec(widths, cfg["clusters"]), seed=cfg["seed"]
            )
        model = sunet.init_flim_model(encoders, seed=cfg["seed"])

    cases = ds.load_split(cfg["split"])
    tc = sunet.TrainConfig(lr0=cfg["lr"], epochs=cfg["epochs"], seed=cfg["seed"])
    trained, curve = sunet.train(
        model, cases, tc, regime,
        progress=lambda row: print(
            f"epoch {row['epoch']:3d}  loss {row['mean_loss']:.4f}  lr {row['lr']:.2e}",
            flush=True,
        ),
    )
    ckpt = out / "checkpoint.ckpt"
    sunet.save_checkpoint(trained, ckpt)
    report.write_loss_curve_csv(curve, out / "loss_curve.csv")
    report.save_loss_curve_figure(curve, out / "loss_curve.png")
    _write_manifest(out, "train", cfg, [args.data], [ckpt], started)
    print(f"trained ({regime}) -> {ckpt}")
    return 0


def _evaluate_checkpoint(ckpt_path, ds: Dataset, split: str):
    model = sunet.load_checkpoint(ckpt_path)
    cases = ds.load_split(split)
    return evaluate(
        lambda case: sunet.predict_labels(model, case.flair, case.t1gd), cases
    )


def cmd_eval(args) -> int:
    started = time.time()
    cfg = _resolve(args, {"split": "test"})
    ds = Dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = _evaluate_checkpoint(args.model, ds, cfg["split"])
    write_report_csv(rep, out / "dice_report.csv")
    report.save_dice_figure(rep, out / "dice_report.png")
    _write_manifest(out, "eval", {**cfg, "model": str(args.model)}, [args.model, args.data],
                    [out / "dice_report.csv"], started)
    for region in ("et", "nc", "wt"):
        print(f"{region.upper()}: {rep.mean(region):.3f}({rep.std(region):.3f})")
    return 0


def cmd_compare(args) -> int:
    started = time.time()
    cfg = _resolve(args, {"split": "test", "names": None})
    ds = Dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = args.models.split(",")
    names = cfg["names"].split(",") if cfg["names"] else [Path(m).stem for m in models]
    if len(names) != len(models):
        raise UsageError("--names must match --models in count")
    rows = []
    for name, ckpt in zip(names, models):
        rep = _evaluate_checkpoint(ckpt, ds, cfg["split"])
        rows.append({"model": name, **{r: (rep.mean(r), rep.std(r)) for r in ("et", "nc", "wt")}})
    report.write_compare_csv(rows, out / "compare.csv")
    report.save_compare_figure(rows, out / "compare.png")
    _write_manifest(out, "compare", {**cfg, "models": models}, models + [args.data],
                    [out / "compare.csv"], started)
    for row in rows:
        print(row["model"], {r: f"{row[r][0]:.3f}({row[r][1]:.3f})" for r in ("et", "nc", "wt")})
    return 0


def cmd_serve(args) -> int:
    cfg = _resolve(args, {"port": 8000, "host": "127.0.0.1"})
    import uvicorn

    from .service import create_app

    app = create_app(args.data, args.out)
    uvicorn.run(app, host=cfg["host"], port=int(cfg["port"]), log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flimseg", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic dataset commands").add_subparsers(
        dest="verb", required=True
    )
    gen = phantom.add_parser("gen", help="generate a phantom dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--config")
    gen.add_argument("--n", type=int)
    gen.add_argument("--size", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--split")
    gen.add_argument("--marked", type=int)
    gen.add_argument("--marker-voxels", dest="marker_voxels", type=int)
    gen.add_argument("--level-jitter", dest="level_jitter", type=float)
    gen.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    gen.set_defaults(func=cmd_phantom_gen)

    flim = sub.add_parser("flim", help="single-shot filter estimation").add_subparsers(
        dest="verb", required=True
    )
    estimate = flim.add_parser("estimate", help="estimate a first-layer bank")
    estimate.add_argument("--data", required=True)
    estimate.add_argument("--out", required=True)
    estimate.add_argument("--config")
    estimate.add_argument("--modality", choices=["FLAIR", "T1Gd"])
    estimate.add_argument("--clusters", type=int)
    estimate.add_argument("--pca", type=int)
    estimate.add_argument("--kernel", type=int)
    estimate.add_argument("--seed", type=int)
    estimate.set_defaults(func=cmd_flim_estimate)

    msflim = sub.add_parser("msflim", help="multi-step filter selection").add_subparsers(
        dest="verb", required=True
    )
    grid = msflim.add_parser("grid", help="run a grid of steps + scripted selection")
    grid.add_argument("--data", required=True)
    grid.add_argument("--out", required=True)
    grid.add_argument("--config")
    grid.add_argument("--grid")
    grid.add_argument("--target", type=int)
    grid.add_argument("--tau", type=float)
    grid.add_argument("--kernel", type=int)
    grid.add_argument("--seed", type=int)
    grid.set_defaults(func=cmd_msflim_grid)

    enc = sub.add_parser("encoder", help="encoder construction").add_subparsers(
        dest="verb", required=True
    )
    build = enc.add_parser("build", help="build both modality encoders")
    build.add_argument("--data", required=True)
    build.add_argument("--out", required=True)
    build.add_argument("--config")
    build.add_argument("--bank-flair", dest="bank_flair")
    build.add_argument("--bank-t1gd", dest="bank_t1gd")
    build.add_argument("--widths")
    build.add_argument("--clusters", type=int)
    build.add_argument("--seed", type=int)
    build.set_defaults(func=cmd_encoder_build)

    train = sub.add_parser("train", help="train the segmentation network")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--config")
    train.add_argument("--regime", choices=["fbp", "pbp", "ft"])
    train.add_argument("--init", choices=["random", "flim", "bank"])
    train.add_argument("--encoders")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--widths")
    train.add_argument("--split")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--config")
    ev.add_argument("--split")
    ev.set_defaults(func=cmd_eval)

    cmp_ = sub.add_parser("compare", help="compare several checkpoints")
    cmp_.add_argument("--models", required=True, help="comma-separated checkpoints")
    cmp_.add_argument("--data", required=True)
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("--config")
    cmp_.add_argument("--names")
    cmp_.add_argument("--split")
    cmp_.set_defaults(func=cmd_compare)

    serve = sub.add_parser("serve", help="start the interactive studio service")
    serve.add_argument("--data", required=True)
    serve.add_argument("--out", required=True)
    serve.add_argument("--config")
    serve.add_argument("--port", type=int)
    serve.add_argument("--host")
    serve.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
