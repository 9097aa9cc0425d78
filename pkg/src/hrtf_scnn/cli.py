"""Command-line entry point: generate | train | interpolate | evaluate | baseline-evaluate."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_config, parse_overrides
from .data import (
    EARS,
    FieldFormatError,
    FrequencyAxis,
    HrtfField,
    fibonacci_grid,
    load_field,
    load_grid,
    make_split,
    save_field,
    save_grid,
    split_known,
    subject_seed,
    synth_subject,
)
from .evaluation import build_report, export_slice, sh_baseline
from .network import CheckpointError, init_model, load_checkpoint, model_forward, save_checkpoint
from .optim import NonFiniteError, Sample, train
from .sh import IllConditioned

log = logging.getLogger("hrtf_scnn")

OUT_ENV = "HRTF_SCNN_OUT"
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


class GridMismatch(ValueError):
    pass


def _field_name(subject: int, ear: str, sparse: bool = False) -> str:
    return f"subject_{subject:03d}_{ear}{'_sparse' if sparse else ''}.txt"


def cmd_generate(cfg: RunConfig, out_dir) -> Path:
    """Synthetic subjects, grids and a train/validation/test manifest."""
    out = Path(out_dir)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    dense = fibonacci_grid(cfg.dense_points)
    ks = split_known(dense, cfg.n_known, cfg.seed, cfg.n_map_in, cfg.cond_threshold)
    subjects = list(range(1, cfg.n_subjects + 1))
    split = make_split(subjects, tuple(cfg.proportions), cfg.seed)
    freqs = FrequencyAxis.linear(cfg.n_bins, cfg.f_min, cfg.f_max)
    synth = cfg.synth_config()
    files = {}
    for sid in subjects:
        for ear in EARS:
            hrtf = synth_subject(subject_seed(cfg.seed, sid, ear), freqs, dense, synth, sid, ear)
            save_field(hrtf, out / "fields" / _field_name(sid, ear))
            save_field(hrtf.subset(ks.known_index), out / "fields" / _field_name(sid, ear, sparse=True))
            files[f"{sid}/{ear}"] = {"dense": f"fields/{_field_name(sid, ear)}",
                                     "sparse": f"fields/{_field_name(sid, ear, True)}"}
    save_grid(dense, out / "dense_grid.txt")
    save_grid(ks.known, out / "known_grid.txt")
    manifest = {
        "format": "hrtf-dataset",
        "version": MANIFEST_VERSION,
        "dense_grid": {"file": "dense_grid.txt", "sha256": dense.digest},
        "known_grid": {"file": "known_grid.txt", "sha256": ks.known.digest},
        "known_index": ks.known_index.tolist(),
        "unknown_index": ks.unknown_index.tolist(),
        "frequencies_hz": freqs.values.tolist(),
        "split": {"train": list(split.train), "validation": list(split.validation), "test": list(split.test)},
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    cfg.write(out / "run_config.json")
    log.info("wrote %d field pairs to %s (split %s)", len(files), out, split.sizes)
    return out


class Dataset:
    """A generated dataset directory, loaded lazily through its manifest."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.is_file():
            raise DatasetError(f"{self.root}: no manifest.json")
        try:
            self.manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        if self.manifest.get("format") != "hrtf-dataset" or self.manifest.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"{path}: unsupported manifest format/version")
        self.dense = load_grid(self.root / self.manifest["dense_grid"]["file"])
        self.known = load_grid(self.root / self.manifest["known_grid"]["file"])
        for grid, key in ((self.dense, "dense_grid"), (self.known, "known_grid")):
            if grid.digest != self.manifest[key]["sha256"]:
                raise DatasetError(f"{path}: {key} hash mismatch")
        self.known_index = np.array(self.manifest["known_index"], dtype=np.intp)
        self.unknown_index = np.array(self.manifest["unknown_index"], dtype=np.intp)
        self.split = self.manifest["split"]

    def field(self, subject: int, ear: str, sparse: bool = False) -> HrtfField:
        entry = self.manifest["files"].get(f"{subject}/{ear}")
        if entry is None:
            raise DatasetError(f"subject {subject} ({ear}) not in manifest")
        return load_field(self.root / entry["sparse" if sparse else "dense"])

    def samples(self, part: str):
        out = []
        for sid in self.split[part]:
            for ear in EARS:
                sparse = self.field(sid, ear, sparse=True)
                if sparse.grid != self.known:
                    raise GridMismatch(f"sparse field for subject {sid} ({ear}) is not on the known grid")
                out.append(Sample(sparse.values, self.field(sid, ear).values, f"{sid:03d}_{ear}"))
        return out


def cmd_train(cfg: RunConfig, dataset_dir, out_dir):
    ds = Dataset(dataset_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_samples = ds.samples("train")
    val_samples = ds.samples("validation")
    if not train_samples or not val_samples:
        raise DatasetError("training and validation splits must be non-empty")
    channels = train_samples[0].sparse.shape[1]
    params = init_model(ds.known, ds.dense, channels, cfg.n_map_in, cfg.n_conv, cfg.n_map_out,
                        cfg.width, cfg.bias, cfg.seed, cond_threshold=cfg.cond_threshold)
    params.block2.uses_relu = cfg.relu_last_block
    print(f"model parameters: {params.n_parameters()}", file=sys.stderr)
    rows = ds.unknown_index if cfg.loss_region == "unknown" else None
    result = train(train_samples, val_samples, params, cfg.train_config(), rows=rows,
                   progress=lambda r: log.info("epoch %d train %.4f val %.4f", r.epoch, r.train_lsd, r.val_lsd))
    save_checkpoint(result.params, out / "checkpoint.bin")
    lines = ["epoch\ttrain_lsd\tval_lsd"] + [f"{r.epoch}\t{r.train_lsd!r}\t{r.val_lsd!r}" for r in result.history]
    (out / "history.tsv").write_text("\n".join(lines) + "\n")
    cfg.write(out / "run_config.json")
    summary = {"n_parameters": params.n_parameters(), "best_epoch": result.best_epoch,
               "best_val_lsd_db": result.best_val_lsd if result.history else None,
               "epochs_run": len(result.history), "stopped_early": result.stopped_early}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


def cmd_interpolate(checkpoint, sparse_path, out_path) -> HrtfField:
    params = load_checkpoint(checkpoint)
    sparse = load_field(sparse_path)
    if sparse.grid.digest != params.sparse_grid.digest:
        raise GridMismatch(
            f"input grid {sparse.grid.digest} does not match checkpoint sparse grid {params.sparse_grid.digest}"
        )
    if sparse.values.shape[1] != params.channels:
        raise GridMismatch(f"input has {sparse.values.shape[1]} bins, model expects {params.channels}")
    dense_values, _ = model_forward(sparse.values, params)
    dense = HrtfField(dense_values, params.dense_grid, sparse.freqs, sparse.subject_id, sparse.ear)
    save_field(dense, out_path)
    return dense


def cmd_evaluate(cfg: RunConfig, dataset_dir, out_dir, checkpoint=None, baseline=None, ground_truth=False):
    """Unknown-direction LSD report on the test split for one method."""
    if sum([checkpoint is not None, baseline is not None, ground_truth]) != 1:
        raise ValueError("choose exactly one of a checkpoint, a baseline order, or ground truth")
    ds = Dataset(dataset_dir)
    test_ids = ds.split["test"]
    if not test_ids:
        raise DatasetError("test split is empty")
    if checkpoint is not None:
        params = load_checkpoint(checkpoint)
        if params.sparse_grid != ds.known or params.dense_grid != ds.dense:
            raise GridMismatch(
                f"checkpoint grids ({params.sparse_grid.digest[:12]}, {params.dense_grid.digest[:12]}) do not "
                f"match dataset grids ({ds.known.digest[:12]}, {ds.dense.digest[:12]})"
            )
        label = "SCNN"
        predict = lambda H: model_forward(H, params)[0]  # noqa: E731
    elif baseline is not None:
        label = f"SH N={baseline}"
        predict = lambda H: sh_baseline(H, ds.known, baseline, ds.dense, cfg.cond_threshold)  # noqa: E731
    else:
        label = "ground truth"
        predict = None

    predictions, truths = {}, {}
    for sid in test_ids:
        for ear in EARS:
            truth = ds.field(sid, ear)
            key = f"{sid:03d}_{ear}"
            truths[key] = truth.values
            if predict is None:
                predictions[key] = truth.values
            else:
                predictions[key] = predict(ds.field(sid, ear, sparse=True).values)
    freqs = np.array(ds.manifest["frequencies_hz"])
    report = build_report(label, predictions, truths, ds.unknown_index, freqs,
                          {"method": label, "dataset_test_subjects": list(test_ids),
                           "ears": list(EARS), "averaging": "unweighted mean over test subjects and both ears"})
    slice_subject = cfg.slice_subject if cfg.slice_subject is not None else test_ids[0]
    key = f"{slice_subject:03d}_left"
    if key not in predictions:
        raise DatasetError(f"slice subject {slice_subject} is not in the test split")
    report.slice_rows = export_slice(predictions[key], ds.dense, freqs, cfg.slice_phi, cfg.slice_tolerance)
    report.slice_label = f"subject {slice_subject} left ear, phi={cfg.slice_phi!r}"
    report.write(out_dir)
    return report


# -- argument handling -----------------------------------------------------------

def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, ".")) / default_name


def _config(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run-config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--out", help=f"output path (default: ${OUT_ENV} or . plus a per-command name)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hrtf-scnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train the spherical CNN")
    p.add_argument("--dataset", required=True)
    p = sub.add_parser("interpolate", parents=[common], help="predict a dense field from a sparse one")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="sparse field file")
    p = sub.add_parser("evaluate", parents=[common], help="unknown-direction LSD report")
    p.add_argument("--dataset", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--baseline", type=int, metavar="N", help="SH baseline of order N")
    group.add_argument("--ground-truth", action="store_true", help="score the ground truth against itself")
    p = sub.add_parser("baseline-evaluate", parents=[common], help="report for the SH baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--order", type=int, help="SH order (default: config baseline_order)")
    return parser


def run(args, cfg: RunConfig) -> None:
    if args.command == "generate":
        cmd_generate(cfg, _out_dir(args, "dataset"))
    elif args.command == "train":
        cmd_train(cfg, args.dataset, _out_dir(args, "train"))
    elif args.command == "interpolate":
        cmd_interpolate(args.checkpoint, args.input, _out_dir(args, "interpolated.txt"))
    elif args.command == "evaluate":
        report = cmd_evaluate(cfg, args.dataset, _out_dir(args, "evaluate"), checkpoint=args.checkpoint,
                              baseline=args.baseline, ground_truth=args.ground_truth)
        print(f"{report.method_label}: mean unknown-direction LSD {report.mean_lsd:.4f} dB")
    elif args.command == "baseline-evaluate":
        order = cfg.baseline_order if args.order is None else args.order
        report = cmd_evaluate(cfg, args.dataset, _out_dir(args, "baseline"), baseline=order)
        print(f"{report.method_label}: mean unknown-direction LSD {report.mean_lsd:.4f} dB")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        with threadpool_limits(limits=cfg.threads):
            run(args, cfg)
    except (ConfigError, argparse.ArgumentError) as exc:
        print(f"hrtf-scnn: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (IllConditioned, FieldFormatError, CheckpointError, DatasetError, GridMismatch,
            NonFiniteError, ValueError, OSError) as exc:
        print(f"hrtf-scnn: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
