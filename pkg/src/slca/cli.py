"""Command-line entry point.

Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
3 numeric divergence, 4 gradient-check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import checkpoint, data
from .checks import BLOCKS, run_gradcheck
from .config import RunConfig, config_schema
from .errors import FormatError, NumericError, RejectedInputError
from .experiments import ExperimentRunner, render_markdown, run_ablation, run_block_ablation, run_fraction_sweep
from .model import assemble_model
from .nn import functional as F
from .train import Split, TapCache, train

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4
HEATMAP_SIZE = 128

log = logging.getLogger("slca")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def load_config(path: str, *, need_dataset: bool = True) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_USAGE) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_USAGE) from exc
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise CliError(f"invalid config {path}:\n{exc}", EXIT_USAGE) from exc
    if need_dataset and not Path(cfg.dataset).is_file():
        raise CliError(f"dataset file not found: {cfg.dataset}", EXIT_USAGE)
    return cfg


def load_dataset(cfg: RunConfig) -> data.Dataset:
    try:
        ds = data.load(cfg.dataset)
    except (OSError, FormatError) as exc:
        raise CliError(f"cannot load dataset {cfg.dataset}: {exc}", EXIT_IO) from exc
    enc, bb = cfg.model.encoder, cfg.model.backbone
    if ds.header.image_size != enc.input_size or ds.header.num_classes != bb.num_classes:
        raise CliError(f"dataset ({ds.header.image_size}px, {ds.header.num_classes} classes) does not "
                       f"match the model ({enc.input_size}px, {bb.num_classes} classes)", EXIT_USAGE)
    return ds


def _runner(cfg: RunConfig, ds: data.Dataset, sink=None) -> ExperimentRunner:
    try:
        return ExperimentRunner(ds, cfg.hyper, cfg.train_count, sink)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        ds = data.generate(args.n, args.size, args.classes, args.seed)
    except RejectedInputError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    try:
        ds.save(args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    print(ds.digest())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(cfg)
    runner = _runner(cfg, ds)
    spec, hp = cfg.model, cfg.hyper
    model = assemble_model(spec)
    out = Path(args.out or cfg.out_dir)
    rows: list[str] = []
    run_id = f"{spec.variant}-p{cfg.fraction:g}-s{spec.seed}"
    try:
        record, best = train(model, runner.train_split(cfg.fraction, cfg.split_seed), runner.heldout, hp,
                             taps=TapCache(model.encoder, ds) if model.uses_encoder else None,
                             sink=lambda row: rows.append(json.dumps(row, sort_keys=True)),
                             run_id=run_id, fraction=cfg.fraction, split_seed=cfg.split_seed)
    except NumericError as exc:
        record = getattr(exc, "record", None)
        if record is not None:
            _write_text(out / "record.json", record.to_json())
        _write_text(out / "metrics.jsonl", "".join(r + "\n" for r in rows))
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from exc
    try:
        _write_text(out / "metrics.jsonl", "".join(r + "\n" for r in rows))
        _write_text(out / "record.json", record.to_json())
        _write_text(out / "timing.json", json.dumps({"wall_clock_seconds": record.wall_clock_seconds}) + "\n")
        checkpoint.save_checkpoint(best, out / "best.ckpt")
    except OSError as exc:
        raise CliError(f"cannot write outputs to {out}: {exc}", EXIT_IO) from exc
    print(json.dumps({"out_dir": str(out), "best_epoch": record.best_epoch,
                      "best_val_accuracy": record.best_val_accuracy, "test": record.final_test}))
    return EXIT_OK


def table_rows(table: dict) -> list[dict]:
    """Flatten a result table to the JSON array written next to its Markdown rendering."""
    rows = [dict(r, mode=table["mode"]) for r in table["rows"]]
    rows += [dict(r, mode=table["mode"], variant="improvement") for r in table.get("improvements", [])]
    return rows


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(cfg)
    metrics: list[str] = []
    runner = _runner(cfg, ds, sink=lambda row: metrics.append(json.dumps(row, sort_keys=True)))
    try:
        if args.mode == "fusion":
            table = run_ablation(runner, cfg.model, cfg.seeds, workers=args.workers)
        elif args.mode == "blocks":
            table = run_block_ablation(runner, cfg.model, cfg.seeds, workers=args.workers)
        else:
            table = run_fraction_sweep(runner, cfg.model, cfg.fractions, cfg.seeds, workers=args.workers)
    except NumericError as exc:
        raise CliError(f"a run diverged: {exc}", EXIT_DIVERGED) from exc
    out = Path(args.out or cfg.out_dir)
    md = render_markdown(table)
    try:
        _write_text(out / f"ablation-{args.mode}.json", json.dumps(table_rows(table), indent=2, sort_keys=True) + "\n")
        _write_text(out / f"ablation-{args.mode}.md", md)
        _write_text(out / f"ablation-{args.mode}-records.jsonl",
                    "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in runner.records.values()))
        if metrics:
            _write_text(out / f"ablation-{args.mode}-metrics.jsonl", "".join(m + "\n" for m in metrics))
    except OSError as exc:
        raise CliError(f"cannot write outputs to {out}: {exc}", EXIT_IO) from exc
    print(md, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    spec = load_config(args.config, need_dataset=False).model if args.config else RunConfig(dataset="").model
    report, threshold = run_gradcheck(spec, args.block, corrupt=args.corrupt)
    passed = report.passed(threshold)
    doc = dict(report.to_dict(), block=args.block, threshold=threshold, passed=passed)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        try:
            _write_text(Path(args.out), text)
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    print(text, end="")
    return EXIT_OK if passed else EXIT_GRADCHECK


def heatmap(grid: np.ndarray, size: int = HEATMAP_SIZE) -> np.ndarray:
    """Nearest-upsample a 2-D map to ``size`` x ``size`` and min-max scale it to uint8.

    A constant map has no range to normalise and becomes uniform mid-gray (128).
    """
    up = F.upsample_nearest(grid[None, None].astype(np.float64), size, size)[0, 0]
    lo, hi = up.min(), up.max()
    if not hi > lo:
        return np.full((size, size), 128, dtype=np.uint8)
    return np.rint((up - lo) / (hi - lo) * 255).astype(np.uint8)


def pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def cmd_viz_attn(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(cfg)
    if not 0 <= args.image_index < len(ds):
        raise CliError(f"image index {args.image_index} out of range [0, {len(ds)})", EXIT_USAGE)
    model = assemble_model(cfg.model)
    if not model.uses_encoder or cfg.model.variant == "add_no_attention":
        raise CliError(f"variant {cfg.model.variant} has no attention maps", EXIT_USAGE)
    try:
        checkpoint.load_model_state(model, args.ckpt)
    except (OSError, FormatError) as exc:
        raise CliError(f"cannot load checkpoint {args.ckpt}: {exc}", EXIT_IO) from exc
    except (KeyError, ValueError) as exc:
        raise CliError(f"checkpoint {args.ckpt} does not fit the configured model: {exc}", EXIT_USAGE) from exc
    image = data.to_feature_map(ds.images[args.image_index : args.image_index + 1])
    taps = model.encode(image)
    maps = [a[0].mean(axis=0) for a in model.attention_maps(taps)]
    out = Path(args.out)
    names = [f"attn-{i}-{tap}.pgm" for i, tap in enumerate(cfg.model.tap_assignment)] + ["tap-neck.pgm"]
    grids = maps + [taps.neck[0].mean(axis=0)]
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, grid in zip(names, grids):
            (out / name).write_bytes(pgm_bytes(heatmap(grid)))
    except OSError as exc:
        raise CliError(f"cannot write heatmaps to {out}: {exc}", EXIT_IO) from exc
    print("\n".join(str(out / n) for n in names))
    return EXIT_OK


def cmd_schema(args) -> int:
    text = json.dumps(config_schema(), indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text(Path(args.out), text)
    else:
        print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slca", description="Frozen-encoder feature fusion experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic shape dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=_positive, default=2500)
    g.add_argument("--size", type=_positive, default=64)
    g.add_argument("--classes", type=_positive, default=4)
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model and write metrics, checkpoint and record")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: config out_dir)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run a multi-seed ablation or data-fraction sweep")
    a.add_argument("--config", required=True)
    a.add_argument("--mode", required=True, choices=["fusion", "blocks", "fractions"])
    a.add_argument("--workers", type=_positive, default=1)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check in 64-bit")
    c.add_argument("--config")
    c.add_argument("--block", required=True, choices=list(BLOCKS))
    c.add_argument("--out", help="also write the report JSON here")
    c.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("viz-attn", help="write attention heatmaps as PGM files")
    v.add_argument("--config", required=True)
    v.add_argument("--ckpt", required=True)
    v.add_argument("--image-index", type=int, required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz_attn)

    s = sub.add_parser("schema", help="print the run config JSON schema")
    s.add_argument("--out")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"slca: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
