"""Command line for hdseg: synth, pretrain, adapt, eval, bench.

Exit status: 0 success, 2 configuration error, 3 data/format error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from hdseg.config import RunConfig, load_config
from hdseg.data import LabeledFeatureSet, generate_synthetic, load_stage, parse_class_remap, save_stage
from hdseg.errors import ConfigError, FormatError, HDSegError, NoDataError
from hdseg.hdc import ClassModel, Encoder
from hdseg.pipeline import adapt, evaluate, pretrain, write_records_csv

log = logging.getLogger("hdseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4

ENCODER_FILE = "encoder.henc"
MODEL_FILE = "model.hseg"
ADAPTED_FILE = "adapted.hseg"
ADAPT_REPORT = "adapt_report.csv"
EVAL_REPORT = "eval.csv"
BENCH_REPORT = "bench.csv"


def _stage(cfg: RunConfig, key: str, out: Path) -> LabeledFeatureSet:
    path = cfg.stage_path(key, out)
    remap = None
    if cfg.class_remap is not None:
        if not cfg.class_remap.is_file():
            raise FileNotFoundError(f"class remap file not found: {cfg.class_remap}")
        remap = parse_class_remap(cfg.class_remap.read_text())
    data = load_stage(path, feature_dim=cfg.feature_dim, class_remap=remap)
    log.info("loaded %s: %d points in %d scans from %s", key, len(data), data.num_scans, path)
    return data


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"required file not found: {path}")
    return path


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    stages = generate_synthetic(cfg.synthetic_spec())
    for key, data in zip(("pretrain_data", "adapt_data", "test_data"), stages):
        path = cfg.stage_path(key, out)
        save_stage(path, data)
        log.info("wrote %d scans to %s", data.num_scans, path)


def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    encoder, model = pretrain(cfg.stage_config(), _stage(cfg, "pretrain_data", out))
    encoder.save(out / ENCODER_FILE)
    model.save(out / MODEL_FILE)
    log.info("wrote %s and %s", out / ENCODER_FILE, out / MODEL_FILE)


def cmd_adapt(cfg: RunConfig, out: Path) -> None:
    encoder = Encoder.load(_require(out / ENCODER_FILE))
    model = ClassModel.load(_require(out / MODEL_FILE))
    report = adapt(cfg.stage_config(), encoder, model, _stage(cfg, "adapt_data", out), _stage(cfg, "test_data", out))
    report.final_model.save(out / ADAPTED_FILE)
    report.to_csv(out / ADAPT_REPORT)
    log.info("final miou %.4f, %.2f scans/s; wrote %s", report.final_miou, report.throughput_fps, out / ADAPT_REPORT)


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    encoder = Encoder.load(_require(out / ENCODER_FILE))
    model_path = out / ADAPTED_FILE if (out / ADAPTED_FILE).is_file() else _require(out / MODEL_FILE)
    model = ClassModel.load(model_path)
    record = evaluate(encoder, model, _stage(cfg, "test_data", out), threads=cfg.threads)
    write_records_csv(out / EVAL_REPORT, [record])
    if log.isEnabledFor(logging.WARNING):
        print(f"model={model_path.name} miou={record.miou:.4f} points={record.points_processed}")


def cmd_bench(cfg: RunConfig, out: Path) -> None:
    """Adapt the same pretrained model once per buffer ratio and tabulate the trade-off."""
    pre = _stage(cfg, "pretrain_data", out)
    stream = _stage(cfg, "adapt_data", out)
    test = _stage(cfg, "test_data", out)
    base = cfg.stage_config()
    encoder, model = pretrain(base, pre)
    rows = []
    for k in cfg.bench_ratios:
        run_cfg = dataclasses.replace(cfg, buffer_ratio_percent=k).stage_config()
        report = adapt(run_cfg, encoder, model, stream, test)
        rows.append((k, report.final_miou, report.retrain_fps, report.retrain_time))
        log.info("k=%g: miou %.4f, retrain %.2f scans/s", k, report.final_miou, report.retrain_fps)
    with open(out / BENCH_REPORT, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "final_miou", "retrain_fps", "retrain_time_s"])
        for k, miou, fps, wall in rows:
            writer.writerow([repr(k), repr(miou), repr(fps), repr(wall)])


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdseg", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="flat key = value run configuration")
    parser.add_argument("--out", type=Path, default=Path("run"), help="output directory (default: ./run)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; repeatable, wins over the config file")
    parser.add_argument("--threads", type=int, help="worker threads (default: config, else CPU count)")
    parser.add_argument("--quiet", action="store_true", help="only report errors")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.ERROR if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        cfg = load_config(args.config, args.overrides)
        if args.threads is not None:
            cfg.threads = args.threads
        cfg.stage_config()  # validate before touching any data
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError, NoDataError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except HDSegError as exc:
        log.error("invariant violation: %s", exc)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
