"""``sttdrec`` command line: data preparation, training, distillation and reports.

Exit codes: 0 success, 2 configuration error, 3 I/O or input-data error,
4 numerical failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

from . import config as cfgmod
from .data import (DatasetBundle, FormatSpec, build_bundle, ingest, load_bundle, save_bundle,
                   synth_generate)
from .distill import distill, partition_hot_cold, read_training_log
from .metrics import evaluate, latency_benchmark, long_tail_report
from .model import SessionRecModel
from .training import train_supervised
from .tt_compress import (DATASETS, PUBLISHED_STUDENTS, PUBLISHED_GRID, FactorizedShape, Mode,
                          compression_report, student_shape, grid_shape)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("sttdrec")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


# -- helpers ----------------------------------------------------------------------------

def _out_dir(args, run) -> Path:
    out = Path(args.out) if args.out else run.out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _target(out: Path, name: str | None, default: str, force: bool) -> Path:
    path = Path(name) if name else out / default
    if path.exists() and not force:
        raise CliError(f"{path} exists; pass --force to overwrite", EXIT_IO)
    return path


def _load_bundle(path) -> DatasetBundle:
    try:
        return load_bundle(path)
    except FileNotFoundError:
        raise CliError(f"{path}: bundle not found") from None
    except (ValueError, KeyError) as exc:
        raise CliError(f"{path}: unreadable bundle ({exc})") from None


def _load_model(path) -> SessionRecModel:
    try:
        return SessionRecModel.load(path)
    except FileNotFoundError:
        raise CliError(f"{path}: checkpoint not found") from None
    except (ValueError, KeyError) as exc:
        raise CliError(f"{path}: unreadable checkpoint ({exc})") from None


def _check_compatible(model: SessionRecModel, bundle: DatasetBundle, what: str) -> None:
    if model.config.num_items != bundle.num_items:
        raise CliError(f"{what} has {model.config.num_items} items but the bundle has "
                       f"{bundle.num_items}")


def _write_run_config(out: Path, run) -> None:
    (out / "config.ini").write_text(run.to_ini())


# -- commands -----------------------------------------------------------------------------

def cmd_preprocess(args, run) -> int:
    out = _out_dir(args, run)
    target = _target(out, args.output, "bundle.bin", args.force)
    fmt = FormatSpec(delimiter=args.delimiter or run.data["delimiter"])
    try:
        raw = ingest(args.input, fmt)
    except FileNotFoundError:
        raise CliError(f"{args.input}: no such file") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    try:
        bundle = build_bundle(raw, run.data["min_item_count"], run.data["val_fraction"], run.seed)
    except ValueError as exc:
        raise CliError(f"{args.input}: {exc}") from None
    save_bundle(bundle, target)
    print(bundle.format_statistics())
    print(f"wrote {target}")
    return EXIT_OK


def cmd_synth(args, run) -> int:
    out = _out_dir(args, run)
    target = _target(out, args.output, "bundle.bin", args.force)
    d = run.data
    if "synth_sessions" not in d:
        raise CliError("[data] synth_sessions: missing (use the synthetic preset)", EXIT_CONFIG)
    bundle = synth_generate(run.num_items or 200, d["synth_sessions"], d["synth_length"],
                            d["synth_sharpness"], run.seed, d["synth_skew"],
                            d["synth_branching"], d["synth_cyclic"], d["min_item_count"],
                            d["val_fraction"])
    save_bundle(bundle, target)
    print(bundle.format_statistics())
    print(f"wrote {target}")
    return EXIT_OK


def cmd_train_teacher(args, run) -> int:
    out = _out_dir(args, run)
    target = _target(out, args.output, "teacher.ckpt", args.force)
    bundle = _load_bundle(args.bundle or out / "bundle.bin")
    model = SessionRecModel(run.teacher_config(bundle.num_items), seed=run.seed)
    try:
        res = train_supervised(model, bundle.train_instances, bundle.valid_instances,
                               run.epochs, run.lr, run.weight_decay, run.batch_size,
                               run.patience, run.seed, out / "teacher_log.tsv")
    finally:
        # whatever state the model holds is finite: adam_step refuses non-finite updates
        model.save(target, {"role": "teacher", "seed": run.seed})
    _write_run_config(out, run)
    print(f"teacher: {model.store.num_params()} parameters, best epoch {res.best_epoch}")
    print(f"wrote {target}")
    return EXIT_OK


def cmd_distill(args, run) -> int:
    out = _out_dir(args, run)
    target = _target(out, args.output, "student.ckpt", args.force)
    bundle = _load_bundle(args.bundle or out / "bundle.bin")
    teacher = _load_model(args.teacher or out / "teacher.ckpt")
    _check_compatible(teacher, bundle, "teacher")
    scfg = run.student_config(bundle.num_items)
    if scfg.embed_dim != teacher.config.embed_dim:
        raise CliError(f"[model] embed_dim: student {scfg.embed_dim} differs from teacher "
                       f"{teacher.config.embed_dim}", EXIT_CONFIG)
    kd = run.kd
    if args.no_kd:
        kd = kd.ablate(False, False, False)
    else:
        kd = kd.ablate(not args.no_cl, not args.no_pred, not args.no_soft)
    student = SessionRecModel(scfg, seed=run.seed)
    part = partition_hot_cold(bundle.popularity, kd.hot_fraction)
    res = None
    try:
        res = distill(teacher, student, bundle.train_instances, bundle.valid_instances, part, kd,
                      run.seed, out / "distill_log.tsv")
    finally:
        student.save(target, {"role": "student", "seed": run.seed,
                              "betas": [kd.beta1, kd.beta2, kd.beta3]})
    _write_run_config(out, run)
    rep = compression_report(scfg.shape, scfg.embedding_mode) if scfg.shape else None
    print(f"student: {student.store.num_params()} parameters"
          + (f", embedding rate {rep.rate:.2f}" if rep else "")
          + f", betas=({kd.beta1}, {kd.beta2}, {kd.beta3}), best epoch {res.best_epoch}")
    print(f"wrote {target}")
    return EXIT_OK


def _split_instances(bundle: DatasetBundle, name: str):
    return {"test": bundle.test, "valid": bundle.valid_instances,
            "train": bundle.train_instances}[name]


def cmd_evaluate(args, run) -> int:
    out = _out_dir(args, run)
    bundle = _load_bundle(args.bundle or out / "bundle.bin")
    model = _load_model(args.checkpoint)
    _check_compatible(model, bundle, str(args.checkpoint))
    instances = _split_instances(bundle, args.split)
    table = evaluate(model, instances)
    print(table.format())
    stem = Path(args.checkpoint).stem
    (out / f"metrics_{stem}_{args.split}.tsv").write_text(table.to_tsv())
    if args.long_tail:
        lt = long_tail_report(model, instances, bundle.popularity)
        print(lt.format())
        with open(out / f"long_tail_{stem}_{args.split}.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(["bucket", "count", "precision", "contribution", "share"])
            for b in ("popular", "long_tail"):
                w.writerow([b, lt.counts[b], lt.precision[b], lt.contribution[b], lt.share[b]])
    if args.latency:
        _latency(model, bundle, args.repetitions, out, stem)
    if args.plot_data:
        _plot_data(Path(args.plot_data), out)
    return EXIT_OK


def _latency(model, bundle, repetitions, out: Path, stem: str) -> None:
    sessions = [s for s, _ in bundle.test]
    res = latency_benchmark(model, sessions, repetitions)
    print(f"latency: {res.seconds_per_100:.4f} s per 100 sessions "
          f"(median of {len(res.runs)}, host CPU, 1 thread)")
    with open(out / f"latency_{stem}.tsv", "w") as fh:
        fh.write("run\tseconds_per_100\n")
        for i, r in enumerate(res.runs):
            fh.write(f"{i}\t{r:.6f}\n")
        fh.write(f"median\t{res.seconds_per_100:.6f}\n")


def _plot_data(log_path: Path, out: Path) -> None:
    """One x,y CSV per logged column, for any plotting tool."""
    try:
        rows = read_training_log(log_path)
    except (OSError, IndexError, ValueError) as exc:
        raise CliError(f"{log_path}: cannot read training log ({exc})") from None
    for col in rows[0] if rows else []:
        if col == "epoch" or all(math.isnan(r[col]) for r in rows):
            continue
        target = out / f"plot_{log_path.stem}_{col.replace('@', '')}.csv"
        with open(target, "w") as fh:
            fh.write("x,y\n")
            for r in rows:
                if not math.isnan(r[col]):
                    fh.write(f"{r['epoch']},{r[col]:.6f}\n")
    print(f"plot data written to {out}")


def cmd_benchmark(args, run) -> int:
    out = _out_dir(args, run)
    bundle = _load_bundle(args.bundle or out / "bundle.bin")
    model = _load_model(args.checkpoint)
    _check_compatible(model, bundle, str(args.checkpoint))
    _latency(model, bundle, args.repetitions, out, Path(args.checkpoint).stem)
    return EXIT_OK


def _published_tables() -> list[str]:
    lines = ["TT vs STTD on items (10,10,25,8), dims (4,4,4,2), n=2",
             f"{'R':>4}{'TTD size':>10}{'TTD CR':>8}{'STTD size':>11}{'STTD CR':>9}"]
    for r in sorted(PUBLISHED_GRID):
        ttd = compression_report(grid_shape(r, 1), Mode.TTD)
        sttd = compression_report(grid_shape(r, 2), Mode.STTD)
        lines.append(f"{r:>4}{ttd.params_compressed:>10}{ttd.rounded_rate:>8}"
                     f"{sttd.params_compressed:>11}{sttd.rounded_rate:>9}")
    lines.append("")
    lines.append(f"{'dataset':<14}{'student':>8}{'R':>5}{'n':>3}{'CR':>8}{'published':>11}")
    for (ds, stu, r, n), published in sorted(PUBLISHED_STUDENTS.items()):
        rep = compression_report(student_shape(ds, stu, r, n), Mode.STTD)
        flag = "" if rep.rounded_rate == published else "  (differs)"
        lines.append(f"{ds:<14}{'Stu-' + str(stu):>8}{r:>5}{n:>3}{rep.rounded_rate:>8}"
                     f"{published:>11}{flag}")
    return lines


def cmd_compress_report(args, run) -> int:
    if args.paper_tables:
        print("\n".join(_published_tables()))
        return EXIT_OK
    if args.dataset:
        if args.student is None:
            raise CliError("--student is required with --dataset", EXIT_CONFIG)
        try:
            shape = student_shape(args.dataset, args.student, args.rank or 60, args.n or 2)
        except (KeyError, ValueError) as exc:
            raise CliError(f"invalid shape: {exc}", EXIT_CONFIG) from None
        mode = Mode.STTD
    elif args.items:
        try:
            shape = FactorizedShape(cfgmod._ints(args.items), cfgmod._ints(args.dims or ""),
                                    args.rank or 1, args.n or 1, args.num_items)
            mode = Mode(args.mode)
            shape.validate(mode)
        except ValueError as exc:
            raise CliError(f"invalid shape: {exc}", EXIT_CONFIG) from None
    else:
        if run.shape is None:
            raise CliError("[compress] no factorized shape configured", EXIT_CONFIG)
        shape, mode = run.shape, run.mode
    rep = compression_report(shape, mode)
    print(f"mode={Mode(mode).value} items={shape.item_factors} dims={shape.dim_factors} "
          f"R={shape.rank} n={shape.stp_divisor} |V|={shape.num_items} N={shape.embed_dim}")
    print(rep)
    print(f"rounded rate: {rep.rounded_rate}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sttdrec", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI file layered over the preset")
    p.add_argument("--preset", default="synthetic", choices=sorted(cfgmod.PRESETS))
    p.add_argument("--seed", type=int, help="overrides [run] seed")
    p.add_argument("--out", help="output directory (overrides [run] out)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="CSV event log -> dataset bundle")
    s.add_argument("input")
    s.add_argument("--output")
    s.add_argument("--delimiter")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("synth", help="generate a synthetic dataset bundle")
    s.add_argument("--output")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-teacher", help="train the dense teacher")
    s.add_argument("--bundle")
    s.add_argument("--output")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("distill", help="train the compressed student")
    s.add_argument("--bundle")
    s.add_argument("--teacher")
    s.add_argument("--output")
    s.add_argument("--no-cl", action="store_true", help="drop the contrastive task")
    s.add_argument("--no-pred", action="store_true", help="drop the predictive task")
    s.add_argument("--no-soft", action="store_true", help="drop soft-target distillation")
    s.add_argument("--no-kd", action="store_true", help="plain training of the student")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("evaluate", help="ranking metrics for a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--bundle")
    s.add_argument("--split", default="test", choices=("test", "valid", "train"))
    s.add_argument("--long-tail", action="store_true")
    s.add_argument("--latency", action="store_true")
    s.add_argument("--repetitions", type=int, default=5)
    s.add_argument("--plot-data", metavar="LOG", help="training log to turn into x,y series")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compress-report", help="parameter counts and compression rates")
    s.add_argument("--paper-tables", action="store_true",
                   help="rates for the built-in published configurations")
    s.add_argument("--dataset", choices=sorted(DATASETS))
    s.add_argument("--student", type=int, choices=(1, 2, 3, 4))
    s.add_argument("--items", help="item factors, e.g. 10,10,25,8")
    s.add_argument("--dims", help="dimension factors, e.g. 4,4,4,2")
    s.add_argument("--rank", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--num-items", type=int)
    s.add_argument("--mode", default="sttd", choices=[m.value for m in Mode])
    s.set_defaults(func=cmd_compress_report)

    s = sub.add_parser("benchmark", help="seconds per 100 single-session predictions")
    s.add_argument("checkpoint")
    s.add_argument("--bundle")
    s.add_argument("--repetitions", type=int, default=5)
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.seed is not None:
        overrides.setdefault("run", {})["seed"] = str(args.seed)
    try:
        run = cfgmod.load_config(args.config, args.preset, overrides)
        return args.func(args, run)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
