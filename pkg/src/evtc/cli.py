"""Command-line experiment runner.

Subcommands: pipeline, sweep-prune, headprune-table, bench, plot, train,
distill, quantize, eval. Common flags: --config PATH, --out DIR, --seed N,
--checkpoint PATH; environment overrides EVTC_CONFIG / EVTC_OUT / EVTC_SEED /
EVTC_CHECKPOINT sit between flags and config values (flag > env > config).

Every command is a pure function of (config, input artifacts): reruns give
byte-identical CSVs except the flagged timing columns. On a stage failure
the stage name goes to stderr, partial artifacts are kept, and the exit
code is nonzero.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as CK
from . import data as D
from . import distill as DS
from . import metrics as MX
from . import models as M
from . import plotting as PL
from . import prune as PR
from . import quant as Q
from . import train as TR
from .config import ExperimentConfig, load_config, resolve_option
from .errors import ContractError, EvtcError

SWEEP_COLUMNS = ("model", "granularity", "sparsity", "miou", "params")
SWEEP_ITER_COLUMNS = SWEEP_COLUMNS + ("round", "finetune_iters")
HEAD_COLUMNS = ("heads", "miou", "params_theoretical", "params_materialized", "fps")
BENCH_COLUMNS = ("model", "warmup", "runs", "mean_time_s", "std_time_s", "fps", "score")


class StageFailure(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:  # noqa: BLE001 - report the failing stage, keep artifacts
        raise StageFailure(name, e) from e


def _load_experiment(args) -> ExperimentConfig:
    path = resolve_option(args.config, "CONFIG", None)
    if path is None:
        raise ContractError("no config given (use --config or EVTC_CONFIG)")
    cfg = load_config(path)
    seed = resolve_option(args.seed, "SEED", None)
    if seed is not None:
        seed = int(seed)
        cfg.seed = seed
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
        cfg.data.scene.seed = seed
    out = resolve_option(args.out, "OUT", cfg.output_dir)
    cfg.output_dir = out
    return cfg


def _outdir(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _datasets(cfg: ExperimentConfig):
    train_ds = D.generate_split(cfg.data.scene, cfg.data.train_samples, "train")
    eval_ds = D.generate_split(cfg.data.scene, cfg.data.eval_samples, "eval")
    return train_ds, eval_ds


def _result_row(name, model, eval_ds, cfg, sparsity=0.0, mode="fp32"):
    report = TR.evaluate(model, eval_ds)
    bench = MX.bench_latency(model, eval_ds, warmup=cfg.bench.warmup,
                             runs=cfg.bench.runs, eval_report=report)
    return [name, sparsity, mode, report.mean_iou, report.pixel_accuracy,
            M.count_params(model, include_masked=False), M.count_flops(model),
            bench.fps, bench.score], report


# ----------------------------------------------------------------------
# subcommands


def cmd_pipeline(args):
    cfg = _load_experiment(args)
    out = _outdir(cfg)
    train_ds, eval_ds = _stage("data", _datasets, cfg)
    rows = []

    if cfg.distill is not None:
        teacher = _stage("teacher-train", _train_teacher, cfg, train_ds)
        CK.save_checkpoint(teacher, out / "teacher.ckpt")
        row, _ = _stage("teacher-eval", _result_row, "teacher", teacher, eval_ds, cfg)
        rows.append(row)
        student = M.build_model(cfg.student, cfg.seed)
        _stage("distill", DS.distill_train, student, teacher, train_ds, cfg.distill,
               cfg.train)
        CK.save_checkpoint(student, out / "student_kd.ckpt")
        row, _ = _stage("distill-eval", _result_row, "student_kd", student, eval_ds, cfg)
        rows.append(row)
        stage_name = "student_kd"
    else:
        student = M.build_model(cfg.student, cfg.seed)
        _stage("train", TR.train, student, train_ds, cfg.train)
        stage_name = "student"

    mask = None
    if cfg.prune is not None:
        student, mask, realized = _stage("prune", _prune_stage, cfg, student,
                                         train_ds, eval_ds)
        CK.save_checkpoint(student, out / "student_kd_pruned.ckpt", mask=mask)
        row, _ = _stage("prune-eval", _result_row, f"{stage_name}_pruned", student,
                        eval_ds, cfg, sparsity=realized)
        rows.append(row)

    mode = "fp32"
    scales = None
    if cfg.quant is not None:
        student, qreport = _stage("quantize", Q.quantize_model, student, cfg.quant,
                                  eval_ds[:4])
        mode = cfg.quant.mode
        scales = qreport.scales
    CK.save_checkpoint(student, out / "student_final.ckpt", mask=mask, scales=scales)
    final_sparsity = rows[-1][1] if cfg.prune is not None else 0.0
    row, _ = _stage("final-eval", _result_row, "student_final" if rows else "student",
                    student, eval_ds, cfg, sparsity=final_sparsity, mode=mode)
    rows.append(row)

    PL.write_csv(out / "results.csv", MX.RESULTS_COLUMNS, rows, kind="results")
    csv_rows = PL.validate_csv(out / "results.csv", MX.RESULTS_COLUMNS)
    PL.render_png_stage_bars(csv_rows, out / "results.png")
    print(f"wrote {out / 'results.csv'} ({len(rows)} stage rows)")
    return 0


def _train_teacher(cfg: ExperimentConfig, train_ds):
    teacher = M.build_model(cfg.teacher, cfg.seed + 1)
    tcfg = dataclasses.replace(cfg.train, iterations=cfg.teacher_iterations)
    TR.train(teacher, train_ds, tcfg)
    return teacher


def _prune_stage(cfg: ExperimentConfig, model, train_ds, eval_ds):
    psec = cfg.prune
    if psec.iterative is not None:
        ft_cfg = dataclasses.replace(cfg.train, iterations=psec.iterative.finetune_iterations)
        model, mask, _trace = PR.iterative_prune(model, train_ds, psec.spec,
                                                 psec.iterative, ft_cfg,
                                                 eval_dataset=eval_ds)
    else:
        mask = PR.select_and_mask(model, psec.spec)
        if psec.finetune_iterations > 0:
            ft_cfg = dataclasses.replace(cfg.train, iterations=psec.finetune_iterations)
            TR.train(model, train_ds, ft_cfg, mask=mask)
    masked, total = mask.masked_counts()
    realized = masked / total if total else 0.0
    if psec.materialize:
        model = PR.materialize(model, mask)
        mask = None
    return model, mask, realized


def cmd_sweep_prune(args):
    cfg = _load_experiment(args)
    out = _outdir(cfg)
    train_ds, eval_ds = _stage("data", _datasets, cfg)
    granularities = [g.strip() for g in args.granularity.split(",") if g.strip()]
    sparsities = [float(s) for s in args.sparsities.split(",")]

    base = _stage("base-model", _base_model, cfg, train_ds, args.checkpoint)
    iterative = args.iterative is not None
    rows = []
    for g in granularities:
        for i, s in enumerate(sparsities):
            point_seed = cfg.seed + i
            model = base.copy()
            if iterative:
                p, r, f = args.iterative
                sched = PR.IterativeSchedule(step_fraction=p, rounds=int(r),
                                             finetune_iterations=int(f)).validate()
                ft = dataclasses.replace(cfg.train, seed=point_seed)
                spec = PR.PruneSpec(granularity=g, sparsity=p)
                model, mask, trace = _stage(f"iterative-{g}", PR.iterative_prune, model,
                                            train_ds, spec, sched, ft,
                                            eval_dataset=eval_ds)
                for t in trace:
                    rows.append(["student", g, t["cumulative_sparsity"], t["miou"],
                                 M.count_params(model, include_masked=False),
                                 t["round"], t["finetune_iterations"]])
            else:
                spec = PR.PruneSpec(granularity=g, sparsity=s)
                mask = _stage(f"prune-{g}", PR.select_and_mask, model, spec)
                if args.finetune and cfg.prune is not None and cfg.prune.finetune_iterations:
                    ft = dataclasses.replace(cfg.train, seed=point_seed,
                                             iterations=cfg.prune.finetune_iterations)
                    _stage(f"finetune-{g}", TR.train, model, train_ds, ft, mask=mask)
                report = _stage(f"eval-{g}", TR.evaluate, model, eval_ds)
                rows.append(["student", g, s, report.mean_iou,
                             M.count_params(model, include_masked=False)])
            if iterative:
                break  # schedule already covers the sparsity trajectory

    columns = SWEEP_ITER_COLUMNS if iterative else SWEEP_COLUMNS
    PL.write_csv(out / "sweep.csv", columns, rows, kind="sweep")
    csv_rows = PL.validate_csv(out / "sweep.csv", columns)
    series = PL.series_from_rows(csv_rows)
    PL.render_png_lines(series, out / "sweep.png", title="mIoU vs sparsity")
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")
    return 0


def _base_model(cfg, train_ds, checkpoint):
    ck = resolve_option(checkpoint, "CHECKPOINT", None)
    if ck:
        return CK.load_checkpoint(ck)
    model = M.build_model(cfg.student, cfg.seed)
    TR.train(model, train_ds, cfg.train)
    return model


def cmd_headprune_table(args):
    cfg = _load_experiment(args)
    out = _outdir(cfg)
    train_ds, eval_ds = _stage("data", _datasets, cfg)
    base = _stage("base-model", _base_model, cfg, train_ds, args.checkpoint)
    head_counts = [int(h) for h in args.head_counts.split(",")]
    finetune = cfg.prune.finetune_iterations if cfg.prune is not None else 0

    rows = []
    for hc in head_counts:
        if hc > cfg.student.num_heads:
            raise ContractError(f"head count {hc} exceeds configured {cfg.student.num_heads}")
        model = base.copy()
        if hc < cfg.student.num_heads:
            spec = PR.PruneSpec(granularity="head", heads_to_keep=hc)
            mask = _stage("head-prune", PR.select_and_mask, model, spec)
            if finetune:
                ft = dataclasses.replace(cfg.train, iterations=finetune)
                _stage("head-finetune", TR.train, model, train_ds, ft, mask=mask)
            params_theoretical = M.count_params(model, include_masked=False)
            model = _stage("materialize", PR.materialize, model, mask)
        else:
            params_theoretical = M.count_params(model, include_masked=False)
        params_materialized = M.count_params(model, include_masked=True)
        report = _stage("head-eval", TR.evaluate, model, eval_ds)
        bench = MX.bench_latency(model, eval_ds, warmup=cfg.bench.warmup,
                                 runs=cfg.bench.runs, eval_report=report)
        rows.append([hc, report.mean_iou, params_theoretical, params_materialized,
                     bench.fps])

    PL.write_csv(out / "table.csv", HEAD_COLUMNS, rows, kind="headprune",
                 nondeterministic=("fps",))
    csv_rows = PL.validate_csv(out / "table.csv", HEAD_COLUMNS)
    series = PL.series_from_rows(csv_rows, x_col="heads", y_col="miou")
    PL.render_png_lines(series, out / "table.png", xlabel="attention heads",
                        title="head pruning")
    print(f"wrote {out / 'table.csv'} ({len(rows)} rows)")
    return 0


def cmd_bench(args):
    cfg = _load_experiment(args)
    out = _outdir(cfg)
    ck = resolve_option(args.checkpoint, "CHECKPOINT", None)
    if not ck:
        raise ContractError("bench requires --checkpoint")
    model = _stage("load", CK.load_checkpoint, ck)
    eval_ds = D.generate_split(cfg.data.scene, cfg.data.eval_samples, "eval")
    report = _stage("eval", TR.evaluate, model, eval_ds)
    bench = _stage("bench", MX.bench_latency, model, eval_ds, warmup=cfg.bench.warmup,
                   runs=cfg.bench.runs, eval_report=report)
    rows = [[Path(ck).stem, bench.warmup_runs, bench.timed_runs, bench.mean_time,
             bench.std_time, bench.fps, bench.score]]
    PL.write_csv(out / "bench.csv", BENCH_COLUMNS, rows, kind="bench",
                 nondeterministic=("mean_time_s", "std_time_s", "fps", "score"))
    PL.validate_csv(out / "bench.csv", BENCH_COLUMNS)
    print(f"wrote {out / 'bench.csv'}")
    return 0


def cmd_plot(args):
    _, _, rows = PL.read_csv(args.csv)
    if not rows:
        print("error: CSV has no data rows to plot", file=sys.stderr)
        return 1
    series = PL.series_from_rows(rows, x_col=args.x, y_col=args.y)
    PL.write_svg_lines(series, args.out_svg, xlabel=args.x, ylabel=args.y)
    if args.png:
        PL.render_png_lines(series, args.png, xlabel=args.x, ylabel=args.y)
    print(f"wrote {args.out_svg}")
    return 0


def cmd_train(args):
    cfg = _load_experiment(args)
    out = _outdir(cfg)
    train_ds, eval_ds = _stage("data", _datasets, cfg)
    model = M.build_model(cfg.student, cfg.seed)
    _stage("train", TR.train, model, train_ds, cfg.train)
    CK.save_checkpoint(model, out / "student.ckpt")
    row, _ = _stage("eval", _result_row, "student", model, eval_ds, cfg)
    PL.write_csv(out / "results.csv", MX.RESULTS_COLUMNS, [row], kind="results")
    PL.validate_csv(out / "results.csv", MX.RESULTS_COLUMNS)
    print(f"wrote {out / 'student.ckpt'}")
    return 0


def cmd_distill(args):
    cfg = _load_experiment(args)
    if cfg.distill is None:
        raise ContractError("config has no distill section")
    out = _outdir(cfg)
    train_ds, eval_ds = _stage("data", _datasets, cfg)
    ck = resolve_option(args.checkpoint, "CHECKPOINT", None)
    if ck:
        teacher = _stage("load-teacher", CK.load_checkpoint, ck)
    else:
        teacher = _stage("teacher-train", _train_teacher, cfg, train_ds)
        CK.save_checkpoint(teacher, out / "teacher.ckpt")
    student = M.build_model(cfg.student, cfg.seed)
    _stage("distill", DS.distill_train, student, teacher, train_ds, cfg.distill, cfg.train)
    CK.save_checkpoint(student, out / "student_kd.ckpt")
    row, _ = _stage("eval", _result_row, "student_kd", student, eval_ds, cfg)
    PL.write_csv(out / "results.csv", MX.RESULTS_COLUMNS, [row], kind="results")
    PL.validate_csv(out / "results.csv", MX.RESULTS_COLUMNS)
    print(f"wrote {out / 'student_kd.ckpt'}")
    return 0


def cmd_quantize(args):
    cfg = _load_experiment(args)
    if cfg.quant is None:
        raise ContractError("config has no quant section")
    out = _outdir(cfg)
    ck = resolve_option(args.checkpoint, "CHECKPOINT", None)
    if not ck:
        raise ContractError("quantize requires --checkpoint")
    model = _stage("load", CK.load_checkpoint, ck)
    eval_ds = D.generate_split(cfg.data.scene, cfg.data.eval_samples, "eval")
    qmodel, qreport = _stage("quantize", Q.quantize_model, model, cfg.quant, eval_ds[:4])
    CK.save_checkpoint(qmodel, out / "student_quant.ckpt", scales=qreport.scales)
    row, _ = _stage("eval", _result_row, "student_quant", qmodel, eval_ds, cfg,
                    mode=cfg.quant.mode)
    PL.write_csv(out / "results.csv", MX.RESULTS_COLUMNS, [row], kind="results")
    PL.validate_csv(out / "results.csv", MX.RESULTS_COLUMNS)
    print(f"wrote {out / 'student_quant.ckpt'}")
    return 0


def cmd_eval(args):
    cfg = _load_experiment(args)
    out = _outdir(cfg)
    ck = resolve_option(args.checkpoint, "CHECKPOINT", None)
    if not ck:
        raise ContractError("eval requires --checkpoint")
    model = _stage("load", CK.load_checkpoint, ck)
    eval_ds = D.generate_split(cfg.data.scene, cfg.data.eval_samples, "eval")
    row, report = _stage("eval", _result_row, Path(ck).stem, model, eval_ds, cfg)
    PL.write_csv(out / "results.csv", MX.RESULTS_COLUMNS, [row], kind="results")
    PL.validate_csv(out / "results.csv", MX.RESULTS_COLUMNS)
    print(f"miou={report.mean_iou:.4f} acc={report.pixel_accuracy:.4f}")
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evtc",
                                     description="compression-lab experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", default=None, help="experiment JSON config path")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", default=None, type=int, help="global seed override")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, help="checkpoint path")

    p = sub.add_parser("pipeline", help="train->distill->prune->quantize->evaluate")
    common(p)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("sweep-prune", help="mIoU vs sparsity sweep")
    common(p)
    p.add_argument("--granularity", default="unstructured",
                   help="comma list: unstructured,filter,channel")
    p.add_argument("--sparsities", default="0.0,0.3,0.5,0.7,0.9")
    p.add_argument("--finetune", action="store_true",
                   help="finetune after each pruning point (iterations from prune section)")
    p.add_argument("--iterative", default=None, nargs=3, type=float,
                   metavar=("P", "R", "F"),
                   help="iterative schedule: step fraction, rounds, finetune iters")
    p.set_defaults(fn=cmd_sweep_prune)

    p = sub.add_parser("headprune-table", help="head-count ablation table")
    common(p)
    p.add_argument("--head-counts", default="4,2")
    p.set_defaults(fn=cmd_headprune_table)

    p = sub.add_parser("bench", help="latency benchmark for a checkpoint")
    common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("plot", help="render a results CSV to SVG (and optional PNG)")
    p.add_argument("--csv", required=True)
    p.add_argument("--out-svg", required=True)
    p.add_argument("--png", default=None)
    p.add_argument("--x", default="sparsity")
    p.add_argument("--y", default="miou")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("train", help="train the student alone")
    common(p, checkpoint=False)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", help="train teacher (or load) and distill the student")
    common(p)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("quantize", help="post-training quantization of a checkpoint")
    common(p)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except EvtcError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
