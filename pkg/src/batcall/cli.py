"""Command-line interface: ``batcall synth|preprocess|train|eval|classify|explain``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import datagen as dg
from .autodiff import ShapeError
from .dsp import DEFAULT_CUTOFF_HZ, TARGET_RATE, WavFormatError, prefilter, read_wav
from .model import BatConfig, BatModel, CheckpointError, load_checkpoint, predict, save_checkpoint
from .training import AslConfig, DivergenceError, TrainConfig, fit, write_history

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- run config

# key -> (type, default); keys carry a section prefix
DEFAULTS = {
    "seed": (int, 0),
    "threads": (int, 1),
    "dsp.cutoff_hz": (float, DEFAULT_CUTOFF_HZ),
    "dsp.filter_order": (int, 10),
    "dsp.target_rate": (int, TARGET_RATE),
    "dsp.n_fft": (int, 512),
    "dsp.hop": (int, 128),
    "patch.frames": (int, 44),
    "patch.overlap": (int, 22),
    "seq.len": (int, 60),
    "seq.overlap": (int, 15),
    "seq.min_patches": (int, 8),
    "model.embed_dim": (int, 64),
    "model.num_layers": (int, 2),
    "model.num_heads": (int, 2),
    "model.ffn_dim": (int, 32),
    "train.mode": (str, "single"),
    "train.lr_max": (float, 5e-4),
    "train.lr_min": (float, 0.0),
    "train.epochs": (int, 25),
    "train.batch_size": (int, 32),
    "train.sam_rho": (float, 0.05),
    "asl.gamma_pos": (float, 0.0),
    "asl.gamma_neg": (float, 4.0),
    "asl.margin": (float, 0.05),
    "eval.threshold": (float, 0.5),
    "eval.mix_samples": (int, 0),
    "synth.num_species": (int, 4),
    "synth.clips_per_species": (int, 100),
    "synth.clip_seconds": (float, 0.12),
}


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(file_values: dict, overrides: dict) -> dict:
    """Typed config: defaults, then file values, then command-line overrides."""
    cfg = {k: d for k, (_, d) in DEFAULTS.items()}
    for source in (file_values, overrides):
        for key, value in source.items():
            if value is None:
                continue
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            kind = DEFAULTS[key][0]
            try:
                cfg[key] = kind(value)
            except (TypeError, ValueError):
                raise UsageError(f"config key {key!r}: cannot read {value!r} as {kind.__name__}") from None
    if cfg["train.mode"] not in ("single", "mixed"):
        raise UsageError("train.mode must be 'single' or 'mixed'")
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def write_config(cfg: dict, out_dir: Path) -> None:
    """Echo the resolved configuration next to a command's outputs."""
    (out_dir / "config.txt").write_text(format_config(cfg))


def feature_config(cfg: dict) -> dg.FeatureConfig:
    return dg.FeatureConfig(
        cfg["dsp.cutoff_hz"],
        cfg["dsp.filter_order"],
        cfg["dsp.target_rate"],
        cfg["dsp.n_fft"],
        cfg["dsp.hop"],
        cfg["patch.frames"],
        cfg["patch.overlap"],
        cfg["seq.len"],
        cfg["seq.overlap"],
        cfg["seq.min_patches"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr_max=cfg["train.lr_max"],
        lr_min=cfg["train.lr_min"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        sam_rho=cfg["train.sam_rho"],
        seed=cfg["seed"],
        threshold=cfg["eval.threshold"],
        asl=AslConfig(cfg["asl.gamma_pos"], cfg["asl.gamma_neg"], cfg["asl.margin"]),
    )


# ---------------------------------------------------------------- helpers


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    return out


def _species(cache_dir: Path) -> list:
    path = cache_dir / "species.json"
    try:
        return list(json.loads(path.read_text()))
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_split(cache_dir: Path, split: str, num_classes: int, waveforms: bool = False) -> dg.SequenceSet:
    path = cache_dir / f"{split}.batd"
    if not path.exists():
        raise DataError(f"split {split!r} missing: {path} not found")
    wave = cache_dir / f"{split}.wave.batd" if waveforms else None
    if wave is not None and not wave.exists():
        raise DataError(f"{wave} not found")
    return dg.read_cache(path, num_classes, wave)


def _streams(data: dg.SequenceSet, cfg: dict, mode: str, role: str, batch_size: int):
    """Training stream (shuffled or freshly mixed) or a fixed evaluation stream."""
    seed = cfg["seed"]
    if mode == "single":
        return dg.SequenceStream(data, batch_size, shuffle=role == "train", seed=seed)
    n = None
    if role != "train" and cfg["eval.mix_samples"] > 0:
        n = cfg["eval.mix_samples"]
    offset = {"train": 0, "val": 1, "test": 2}[role]
    return dg.MixedBatchStream(
        data, batch_size, seed=seed * 3 + offset, num_samples=n, cfg=feature_config(cfg), fixed=role != "train"
    )


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg) -> int:
    n = cfg["synth.num_species"]
    if not 1 <= n <= dg.MAX_SPECIES:
        raise UsageError(f"--num-species must lie in 1..{dg.MAX_SPECIES}, got {n}")
    out = _out_dir(args.out_dir)
    try:
        m = dg.synth_chirp_dataset(
            out, n, cfg["synth.clips_per_species"], cfg["seed"], cfg["synth.clip_seconds"], threads=cfg["threads"]
        )
    except OSError as exc:
        raise DataError(f"cannot write corpus: {exc}") from None
    print(f"wrote {len(m.entries)} clips of {n} species to {out}")
    return EXIT_OK


def cmd_preprocess(args, cfg) -> int:
    try:
        manifest = dg.DatasetManifest.load(args.manifest)
    except dg.ManifestError as exc:
        raise DataError(str(exc)) from None
    if not manifest.entries:
        raise DataError(f"{args.manifest}: manifest has no entries")
    out = _out_dir(args.out_dir)
    sets, missing = dg.build_sequence_sets(manifest, feature_config(cfg), cfg["threads"])
    for split, data in sets.items():
        dg.write_cache(out / f"{split}.batd", data)
        dg.write_cache(out / f"{split}.wave.batd", data, waveforms=True)
        print(f"{split}: {len(data)} sequences from {len(data.recordings)} recordings")
    (out / "species.json").write_text(json.dumps(manifest.species) + "\n")
    write_config(cfg, out)
    for path, err in missing:
        print(f"missing or unreadable: {path} ({err})", file=sys.stderr)
    return EXIT_DATA if missing else EXIT_OK


def cmd_train(args, cfg) -> int:
    cache = Path(args.cache)
    species = _species(cache)
    mode = cfg["train.mode"]
    mixed = mode == "mixed"
    train = _load_split(cache, "train", len(species), waveforms=mixed)
    val = _load_split(cache, "val", len(species), waveforms=mixed)
    if args.no_val:
        train = train.concat(val)
    if len(train) == 0:
        raise DataError("training split is empty")
    tcfg = train_config(cfg)
    out = _out_dir(args.out_dir)
    write_config(cfg, out)
    model_cfg = BatConfig(
        num_classes=len(species),
        embed_dim=cfg["model.embed_dim"],
        num_layers=cfg["model.num_layers"],
        num_heads=cfg["model.num_heads"],
        ffn_dim=cfg["model.ffn_dim"],
        patch_frames=cfg["patch.frames"],
        patch_overlap=cfg["patch.overlap"],
        seq_len=cfg["seq.len"],
        threshold=cfg["eval.threshold"],
        species=tuple(species),
    )
    model = BatModel(model_cfg, seed=cfg["seed"])
    train_stream = _streams(train, cfg, mode, "train", tcfg.batch_size)
    val_stream = None if args.no_val else _streams(val, cfg, mode, "val", 64)
    print(f"training on {len(train)} sequences ({mode}); validation: {'none' if args.no_val else len(val)}")

    def log(row):
        print(f"epoch {row.epoch}: loss {row.train_loss:.5f} val micro {row.val_micro_f1:.4f} macro {row.val_macro_f1:.4f}")

    try:
        result = fit(model, train_stream, val_stream, tcfg, log=None if args.quiet else log)
    except DivergenceError as exc:
        write_history(exc.history, out / "history.csv")
        save_checkpoint(model, out / "best.batc")
        print(f"training diverged: {exc}; last good weights in {out / 'best.batc'}", file=sys.stderr)
        return EXIT_NUMERIC
    write_history(result.history, out / "history.csv")
    save_checkpoint(model, out / "best.batc")
    final = BatModel(model_cfg)
    final.load_state(result.final_state)
    save_checkpoint(final, out / "final.batc")
    print(f"best epoch {result.best_epoch}; wrote {out / 'best.batc'}")
    return EXIT_OK


def _load_model(path) -> BatModel:
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_eval(args, cfg) -> int:
    from .metrics import evaluate_mixed, evaluate_single

    cache = Path(args.cache)
    model = _load_model(args.checkpoint)
    species = _species(cache)
    if len(species) != model.config.num_classes:
        raise DataError(f"cache has {len(species)} species, checkpoint {model.config.num_classes}")
    mode = args.mode
    data = _load_split(cache, args.split, len(species), waveforms=mode == "mixed")
    if len(data) == 0:
        raise DataError(f"split {args.split!r} is empty")
    stream = _streams(data, cfg, mode, "test" if args.split != "val" else "val", 64)
    threshold = cfg["eval.threshold"]
    evaluate = evaluate_single if mode == "single" else evaluate_mixed
    report = evaluate(model, stream, threshold, species)
    out = _out_dir(args.out_dir)
    report.to_json(out / "report.json")
    if report.confusion is not None:
        report.write_confusion_csv(out / "confusion.csv")
    write_config(cfg, out)
    if report.accuracy is not None:
        print(f"accuracy {report.accuracy:.4f}")
    print(f"micro_f1 {report.micro_f1:.4f}")
    print(f"macro_f1 {report.macro_f1:.4f}")
    return EXIT_OK


def _wav_files(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() == ".wav")


def classify_file(model: BatModel, path: Path, fcfg: dg.FeatureConfig, time_expansion: float, threshold: float) -> list:
    """CSV rows ``[start_ms, end_ms, predicted, *scores]`` for every sequence window."""
    clip = prefilter(read_wav(path, time_expansion), fcfg.cutoff_hz, fcfg.target_rate, fcfg.filter_order, 10.0)
    segs = dg.recording_segments(clip, fcfg)
    if not segs:
        raise ValueError("recording is shorter than one sequence")
    names = model.config.class_names
    seqs = [dg.sequence_features(s.samples, fcfg, clip.sample_rate) for s in segs]
    rows = []
    for i in range(0, len(seqs), 16):
        chunk = seqs[i : i + 16]
        labels, scores = predict(model(chunk), threshold)
        for seg, lab, sc in zip(segs[i : i + 16], labels, scores):
            # real-time milliseconds: expanded time divided by the expansion factor
            start = seg.start_sample / fcfg.target_rate / 10.0 * 1000.0
            end = (seg.start_sample + len(seg.samples)) / fcfg.target_rate / 10.0 * 1000.0
            pred = ";".join(n for n, on in zip(names, lab) if on)
            rows.append([f"{start:.3f}", f"{end:.3f}", pred] + [f"{v:.6f}" for v in sc])
    return rows


def cmd_classify(args, cfg) -> int:
    directory = Path(args.directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    model = _load_model(args.checkpoint)
    fcfg = feature_config(cfg)
    te = 10.0 if args.time_expanded else 1.0
    threshold = cfg["eval.threshold"]
    files = _wav_files(directory)
    names = model.config.class_names

    def work(path):
        try:
            return classify_file(model, path, fcfg, te, threshold)
        except (OSError, ValueError, ShapeError) as exc:
            return [["", "", f"ERROR: {exc}"] + [""] * len(names)]

    if cfg["threads"] > 1:
        with ThreadPoolExecutor(cfg["threads"]) as pool:
            results = list(pool.map(work, files))
    else:
        results = [work(p) for p in files]
    out = Path(args.csv_out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["file", "start_ms", "end_ms", "predicted_species"] + names)
            for path, rows in zip(files, results):
                for row in rows:
                    w.writerow([path.name] + row)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from None
    print(f"classified {len(files)} files -> {out}")
    return EXIT_OK


def _to_db(values: np.ndarray, floor_db: float = -60.0) -> np.ndarray:
    db = 20 * np.log10(np.maximum(values, 10 ** (floor_db / 20)))
    return (db - floor_db) / -floor_db


def save_image(values: np.ndarray, path: Path) -> None:
    """One pixel per spectrogram cell, low frequencies at the bottom, fixed palette."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(path, np.clip(values, 0, 1), cmap="viridis", vmin=0.0, vmax=1.0, origin="lower")


def cmd_explain(args, cfg) -> int:
    from .explain import gradcam, mask_input, stitch_patches

    model = _load_model(args.checkpoint)
    fcfg = feature_config(cfg)
    te = 10.0 if args.time_expanded else 1.0
    try:
        clip = prefilter(read_wav(args.wav, te), fcfg.cutoff_hz, fcfg.target_rate, fcfg.filter_order, 10.0)
    except (OSError, WavFormatError, ValueError) as exc:
        raise DataError(f"{args.wav}: {exc}") from None
    segs = dg.recording_segments(clip, fcfg)
    if not segs:
        raise DataError(f"{args.wav}: recording is shorter than one sequence")
    if not 0 <= args.window < len(segs):
        raise UsageError(f"--window must lie in 0..{len(segs) - 1}")
    seq = dg.sequence_features(segs[args.window].samples, fcfg, clip.sample_rate)
    labels, scores = predict(model(seq), cfg["eval.threshold"])
    out = _out_dir(args.out_dir)
    spec = stitch_patches(seq.patches, fcfg.patch_stride)
    save_image(_to_db(spec), out / "spectrogram.png")
    names = model.config.class_names
    chosen = list(np.flatnonzero(labels[0]))
    if not chosen:
        warnings.warn("no species predicted; only the spectrogram was written")
        print("no species predicted", file=sys.stderr)
    for c in chosen:
        amap = gradcam(model, seq, int(c))
        save_image(amap.values, out / f"activation_{names[c]}.png")
        save_image(_to_db(mask_input(spec, amap)), out / f"masked_{names[c]}.png")
        print(f"{names[c]}: score {scores[0, c]:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    p = _Parser(prog="batcall", description="Bat call sequence classification", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic chirp corpus")
    s.add_argument("out_dir")
    s.add_argument("--num-species", type=int, dest="synth.num_species")
    s.add_argument("--clips-per-species", type=int, dest="synth.clips_per_species")
    s.add_argument("--clip-seconds", type=float, dest="synth.clip_seconds")

    s = sub.add_parser("preprocess", parents=[common], help="turn a manifest into tensor caches")
    s.add_argument("manifest")
    s.add_argument("out_dir")
    s.add_argument("--cutoff-hz", type=float, dest="dsp.cutoff_hz")
    s.add_argument("--hop", type=int, dest="dsp.hop")

    s = sub.add_parser("train", parents=[common], help="train a model from a cache directory")
    s.add_argument("cache")
    s.add_argument("out_dir")
    s.add_argument("--mode", choices=["single", "mixed"], dest="train.mode")
    s.add_argument("--epochs", type=int, dest="train.epochs")
    s.add_argument("--batch-size", type=int, dest="train.batch_size")
    s.add_argument("--lr", type=float, dest="train.lr_max")
    s.add_argument("--sam-rho", type=float, dest="train.sam_rho")
    s.add_argument("--no-val", action="store_true", help="merge the validation split into training")
    s.add_argument("--quiet", action="store_true")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a cached split")
    s.add_argument("cache")
    s.add_argument("checkpoint")
    s.add_argument("--split", default="test", choices=list(dg.SPLITS))
    s.add_argument("--mode", default="single", choices=["single", "mixed"])
    s.add_argument("--threshold", type=float, dest="eval.threshold")
    s.add_argument("--mix-samples", type=int, dest="eval.mix_samples")
    s.add_argument("--out-dir", default="eval_out")

    s = sub.add_parser("classify", parents=[common], help="classify every WAV in a directory to CSV")
    s.add_argument("directory")
    s.add_argument("checkpoint")
    s.add_argument("csv_out")
    s.add_argument("--threshold", type=float, dest="eval.threshold")
    s.add_argument("--time-expanded", action="store_true", help="recordings are already 1:10 time expanded")

    s = sub.add_parser("explain", parents=[common], help="Grad-CAM images for one recording")
    s.add_argument("wav")
    s.add_argument("checkpoint")
    s.add_argument("out_dir")
    s.add_argument("--threshold", type=float, dest="eval.threshold")
    s.add_argument("--time-expanded", action="store_true")
    s.add_argument("--window", type=int, default=0, help="sequence window to explain")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "classify": cmd_classify,
    "explain": cmd_explain,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    ns = vars(args)
    overrides = {k: v for k, v in ns.items() if "." in k}
    for key in ("seed", "threads"):
        if key in ns:
            overrides[key] = ns[key]
    try:
        file_values = {}
        if "config" in ns:
            try:
                file_values = parse_config_text(Path(ns["config"]).read_text())
            except OSError as exc:
                raise UsageError(f"cannot read config: {exc}") from None
        cfg = resolve_config(file_values, overrides)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"batcall: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, dg.ManifestError, dg.CacheError, CheckpointError, WavFormatError) as exc:
        print(f"batcall: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as exc:
        print(f"batcall: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
