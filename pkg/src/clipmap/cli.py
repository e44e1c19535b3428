"""Command-line entry point: ``clipmap <command> --config FILE [...]``.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric failure.
The config and every input checkpoint are loaded before any output is
created, so a bad run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import ctypes
import ctypes.util
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .checkpoint import load_maps, load_model, save_maps, save_model
from .config import RunConfig
from .data import make_split
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, NumericError
from .evaluation import (
    export_heatmap_csv,
    format_table,
    off_diagonal_mass,
    report_rows,
    retrieval_report,
    write_report_csv,
    zero_shot_accuracy,
)
from .fileio import atomic_open
from .losses import clip_task_loss
from .mapping import INIT_METHODS, init_maps, materialize_student, mapping_param_count
from .model import ClipModel, count_params, forward_logits, init_clip_model
from .training import pretrain_teacher, run_mapping_stage, run_retraining_stage

log = logging.getLogger("clipmap")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("pretrain-teacher", "map", "retrain", "eval", "inspect-maps", "compare-init")
END_WINDOW = 20  # end-of-stage loss = mean task loss over the last this-many steps


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clipmap", description="Mapping-based compression of a toy dual encoder.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value run configuration (defaults apply when omitted)")
    p.add_argument("--teacher", help="teacher checkpoint")
    p.add_argument("--student", help="student checkpoint")
    p.add_argument("--maps", help="mapping checkpoint (inspect-maps)")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    p.add_argument("--deterministic", action="store_true", help="pin BLAS to one thread")
    p.add_argument("--quiet", action="store_true", help="only warnings on stderr")
    return p


# -- helpers ------------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer", key="run.seed")
        cfg.set("run.seed", args.seed)
    return cfg


def _require(args, flag: str) -> str:
    value = getattr(args, flag)
    if not value:
        raise ConfigError(f"{args.command} needs --{flag}", key=flag)
    return value


def _check_teacher(teacher: ClipModel, cfg: RunConfig) -> None:
    for kind, want in (("image", cfg.image_config()), ("text", cfg.text_config())):
        have = getattr(teacher, kind).config
        if have != want:
            diff = [f"{f}={getattr(have, f)} (config {getattr(want, f)})"
                    for f in want.__dataclass_fields__ if getattr(have, f) != getattr(want, f)]
            raise ConfigError(f"teacher {kind} tower does not match the config: {', '.join(diff)}", key="model")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _val_task_loss(model: ClipModel, data, batch: int) -> float:
    losses = []
    with no_grad():
        for s in range(0, len(data) - batch + 1, batch):
            idx = np.arange(s, s + batch)
            losses.append(float(clip_task_loss(*forward_logits(model, *data.batch(idx))).data))
    return float(np.mean(losses))


def end_of_stage(values: np.ndarray, window: int = END_WINDOW) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.mean(values[-window:])) if len(values) else float("nan")


# -- commands -----------------------------------------------------------------------

def cmd_pretrain_teacher(args, cfg: RunConfig) -> int:
    spec = cfg.synthetic_spec()
    stage = cfg.stage_config("pretrain")
    out = _out_dir(args)
    train, val = make_split(spec, "train"), make_split(spec, "val")
    teacher, loss_log = pretrain_teacher(cfg.image_config(), cfg.text_config(), train, stage,
                                         model_seed=cfg["run.seed"])
    save_model(out / "teacher.ckpt", teacher, role="teacher", config=cfg.dump())
    loss_log.write_csv(out / "teacher_loss.csv")
    rep = retrieval_report(teacher, val)
    print(f"teacher: {stage.steps} steps, val TR@1 {rep.tr[1]:.2f}  IR@1 {rep.ir[1]:.2f}")
    return EXIT_OK


def cmd_map(args, cfg: RunConfig) -> int:
    teacher = load_model(_require(args, "teacher"))
    _check_teacher(teacher, cfg)
    spec = cfg.compression_spec()
    stage = cfg.stage_config("mapping")
    maps = init_maps(spec, teacher.image.config, teacher.text.config, method=cfg["compress.init"],
                     seed=cfg["run.seed"], off_diag_std=cfg["compress.off_diag_std"])
    out = _out_dir(args)
    heat = out / "heatmaps"
    train = make_split(cfg.synthetic_spec(), "train")
    export_heatmap_csv(maps, heat, 0)
    mid = stage.steps // 2

    def on_step(n, current):
        if n == mid or n == stage.steps:
            export_heatmap_csv(current, heat, n)

    maps, loss_log = run_mapping_stage(teacher, maps, spec, train, stage, lam=cfg["loss.lambda"], on_step=on_step)
    student = materialize_student(teacher, maps, spec)
    save_maps(out / "maps.ckpt", maps, spec, config=cfg.dump())
    save_model(out / "student_init.ckpt", student, role="student", config=cfg.dump())
    loss_log.write_csv(out / "map_loss.csv")
    task = loss_log.column("task_loss")
    if len(task):
        print(f"mapping: {stage.steps} steps, task loss {task[0]:.4f} -> {task[-1]:.4f}")
    else:
        print("mapping: 0 steps, maps left at initialisation")
    return EXIT_OK


def cmd_retrain(args, cfg: RunConfig) -> int:
    teacher = load_model(_require(args, "teacher"))
    _check_teacher(teacher, cfg)
    if args.student:
        student = load_model(args.student)
        origin = args.student
    else:
        student = init_clip_model(*cfg.student_configs(), seed=cfg["run.seed"])
        origin = "random init"
    weights = cfg.loss_weights()
    stage = cfg.stage_config("retraining")
    out = _out_dir(args)
    print(f"effective lambda = {weights.lam}")
    print(f"student: {origin}")
    train, val = make_split(cfg.synthetic_spec(), "train"), make_split(cfg.synthetic_spec(), "val")
    student, loss_log = run_retraining_stage(teacher, student, train, stage, weights)
    save_model(out / "student_final.ckpt", student, role="student", config=cfg.dump())
    loss_log.write_csv(out / "retrain_loss.csv")
    rep = retrieval_report(student, val)
    print(f"retraining: {stage.steps} steps, val TR@1 {rep.tr[1]:.2f}  IR@1 {rep.ir[1]:.2f}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    path = args.student or args.teacher
    if not path:
        raise ConfigError("eval needs --student or --teacher", key="student")
    model = load_model(path)
    spec = cfg.synthetic_spec()
    attr = cfg["eval.attribute"]
    if not 0 <= attr < spec.n_attributes:
        raise ConfigError(f"eval.attribute = {attr}: no such attribute", key="eval.attribute")
    out = _out_dir(args)
    val = make_split(spec, "val")
    report = retrieval_report(model, val)
    acc = {f"zero_shot.attr{attr}": zero_shot_accuracy(model, spec, attr, val)}
    rows = report_rows(report, acc, count_params(model))
    write_report_csv(out / "eval_report.csv", rows)
    print(format_table(rows))
    return EXIT_OK


def cmd_inspect_maps(args, cfg: RunConfig) -> int:
    maps, spec = load_maps(_require(args, "maps"))
    out = _out_dir(args)
    written = export_heatmap_csv(maps, out / "heatmaps", 0)
    for name, t in maps.named_parameters():
        print(f"{name:<24} {str(t.shape):>10}  off-diagonal |mass| {off_diagonal_mass(t.data):.4f}")
    print(f"mapping parameters: {mapping_param_count(spec)}  ({len(written)} heatmaps written)")
    return EXIT_OK


def cmd_compare_init(args, cfg: RunConfig) -> int:
    teacher = load_model(_require(args, "teacher"))
    _check_teacher(teacher, cfg)
    spec = cfg.compression_spec()
    stage = cfg.stage_config("mapping")
    out = _out_dir(args)
    data_spec = cfg.synthetic_spec()
    train, val = make_split(data_spec, "train"), make_split(data_spec, "val")
    rows, schedules = [], []
    for method in INIT_METHODS:
        maps = init_maps(spec, teacher.image.config, teacher.text.config, method=method,
                         seed=cfg["run.seed"], off_diag_std=cfg["compress.off_diag_std"])
        maps, loss_log = run_mapping_stage(teacher, maps, spec, train, stage)
        save_maps(out / f"maps_{method}.ckpt", maps, spec, method=method, config=cfg.dump())
        loss_log.write_csv(out / f"map_loss_{method}.csv")
        student = materialize_student(teacher, maps, spec)
        schedules.append(loss_log.column("lr"))
        rows.append({
            "method": method, "steps": len(loss_log), "warmup": stage.warmup, "lr": stage.lr,
            "end_task_loss": end_of_stage(loss_log.column("task_loss")),
            "val_task_loss": _val_task_loss(student, val, stage.batch_size),
            "val_tr1": retrieval_report(student, val).tr[1],
        })
        log.info("compare-init %s: end task loss %.4f", method, rows[-1]["end_task_loss"])
    if any(len(s) != len(schedules[0]) or not np.array_equal(s, schedules[0]) for s in schedules):
        raise ContractError("init methods ran with different step counts or learning-rate schedules")
    write_compare_csv(out / "compare_init.csv", rows)
    width = max(len(m) for m in INIT_METHODS)
    for r in rows:
        print(f"{r['method']:<{width}}  end task loss {r['end_task_loss']:.4f}  "
              f"val task loss {r['val_task_loss']:.4f}  val TR@1 {r['val_tr1']:.2f}")
    return EXIT_OK


COMPARE_FIELDS = ("method", "steps", "warmup", "lr", "end_task_loss", "val_task_loss", "val_tr1")


def write_compare_csv(path, rows: list[dict]) -> None:
    with atomic_open(path) as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def read_compare_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("steps", "warmup"):
            r[k] = int(r[k])
        for k in ("lr", "end_task_loss", "val_task_loss", "val_tr1"):
            r[k] = float(r[k])
    return rows


HANDLERS = {
    "pretrain-teacher": cmd_pretrain_teacher,
    "map": cmd_map,
    "retrain": cmd_retrain,
    "eval": cmd_eval,
    "inspect-maps": cmd_inspect_maps,
    "compare-init": cmd_compare_init,
}


def _single_thread():
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def _tune_allocator() -> None:
    """Keep freed activation buffers in the heap instead of unmapping them.

    glibc serves arrays above its mmap threshold with fresh pages and returns
    them on free, so every training step page-faults its activations back in.
    Best effort: silently skipped where glibc's mallopt is unavailable.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return
    m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
    mallopt(m_mmap_threshold, 32 << 20)  # glibc's upper limit on 64-bit
    mallopt(m_trim_threshold, 1 << 30)
    mallopt(m_top_pad, 64 << 20)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _tune_allocator()
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
        guard = _single_thread() if args.deterministic else contextlib.nullcontext()
        with guard:
            return HANDLERS[args.command](args, cfg)
    except (ConfigError, DimensionError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure at step {exc.step} in {exc.param}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
