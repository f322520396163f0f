"""Command-line entry point: ``revkd {train-teacher,distill,eval,compare}``.

Exit codes: 0 success, 2 config error, 3 runtime or training error, 4 I/O or
checkpoint-format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from revkd import __version__
from revkd.checkpoint import CheckpointFormatError, load_checkpoint
from revkd.config import ConfigError, ExperimentConfig, load_config, resolve_path
from revkd.data import Corpus, Grammar, GrammarError, MinimalPair, generate_corpus, generate_minimal_pairs, load_grammar
from revkd.evaluate import Evaluator, default_contexts, dumps_json, metric_rows, metrics_csv
from revkd.model import ModelConfig, Weights, count_params
from revkd.trainer import TrainingDivergedError, run_distillation, train_teacher

log = logging.getLogger("revkd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
COMPARISON_COLUMNS = (
    "variant", "status", "objective", "teacher_count", "combination", "stepwise", "progressive",
    "seed", "steps", "loss_total", "perplexity", "mp_accuracy", "mode_mass_m1", "mode_mass_m5",
    "epoch0_mp_accuracy",
)
CONTEXT_POSITIONS = 256


@dataclass
class Data:
    grammar: Grammar
    train: Corpus
    held_out: Corpus
    pairs: list[MinimalPair]


def build_data(cfg: ExperimentConfig) -> Data:
    source = "default" if cfg.data.grammar == "default" else resolve_path(cfg, cfg.data.grammar)
    try:
        grammar = load_grammar(source)
    except GrammarError as exc:
        raise ConfigError(f"data.grammar: {exc}") from None
    train = generate_corpus(grammar, cfg.derived_seed("corpus"), cfg.data.n_tokens)
    held_out = generate_corpus(grammar, cfg.derived_seed("eval_corpus"), cfg.data.eval_tokens)
    pairs = generate_minimal_pairs(grammar, cfg.derived_seed("pairs"), cfg.data.n_pairs)
    return Data(grammar, train, held_out, pairs)


def _contexts(held_out: Corpus, seq_len: int):
    width = min(32, seq_len)
    return default_contexts(held_out, CONTEXT_POSITIONS // width, width)


def _evaluator(data: Data, seq_len: int, teacher=None) -> Evaluator:
    return Evaluator(data.held_out, data.pairs, seq_len, teacher=teacher, contexts=_contexts(data.held_out, seq_len))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _out_dir(cfg: ExperimentConfig, override: Optional[str]) -> Path:
    out = Path(override) if override else Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_summary(cfg: ExperimentConfig, data: Data, report, model_cfg: ModelConfig, extra: dict) -> dict:
    final = report.epochs[-1] if report.epochs else {}
    return {
        "run_id": cfg.run.id,
        "seed": cfg.run.seed,
        "grammar_sha256": data.grammar.digest,
        "corpus": data.train.provenance,
        "held_out": data.held_out.provenance,
        "n_pairs": len(data.pairs),
        "model": model_cfg.to_dict(),
        "n_params": count_params(model_cfg),
        "steps": report.n_steps,
        "final_loss": report.steps[-1]["loss_total"] if report.steps else None,
        "epoch0": report.epochs[0] if report.epochs else {},
        "final": final,
        **extra,
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _teacher_roles(cfg: ExperimentConfig) -> list[str]:
    return ["teacher"] + (["teacher2"] if cfg.teacher2 is not None else [])


def train_teachers(cfg: ExperimentConfig, data: Data, out: Path) -> dict[str, Path]:
    paths = {}
    vocab = len(data.grammar.vocab)
    train_cfg = cfg.teacher_train_config
    for role in _teacher_roles(cfg):
        model_cfg = cfg.model_config(role, vocab)
        log.info("training %s (%d parameters)", role, count_params(model_cfg))
        path = out / f"{role}.ckpt"
        report = train_teacher(model_cfg, train_cfg, cfg.teacher_optim_config, data.train,
                               evaluate=_evaluator(data, train_cfg.seq_len).callback(model_cfg),
                               checkpoint_path=path)
        run_id = f"{cfg.run.id}-{role}"
        _write(out / f"{role}_metrics.csv", metrics_csv(metric_rows(run_id, report.steps, report.epochs)))
        summary = _run_summary(cfg, data, report, model_cfg, {"role": role,
                                                              "train": dataclasses.asdict(train_cfg),
                                                              "optim": dataclasses.asdict(cfg.teacher_optim_config)})
        _write(out / f"{role}_summary.json", dumps_json(summary))
        final = report.epochs[-1] if report.epochs else {}
        log.info("%s done: perplexity %.3f, minimal-pair accuracy %.3f", role,
                 final.get("perplexity", float("nan")), final.get("mp_accuracy", float("nan")))
        paths[role] = path
    return paths


def teacher_paths(cfg: ExperimentConfig, default_dir: Path) -> list[Path]:
    roles = ["teacher", "teacher2"][: cfg.distill.teacher_count]
    out = []
    for role in roles:
        given = getattr(cfg.paths, role)
        path = resolve_path(cfg, given) if given else default_dir / f"{role}.ckpt"
        if not path.is_file():
            raise FileNotFoundError(f"teacher checkpoint not found: {path}")
        out.append(path)
    return out


def distill(cfg: ExperimentConfig, data: Data, teachers: Sequence[Path], out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    loaded = [load_checkpoint(p) for p in teachers]
    student_cfg = cfg.model_config("student", len(data.grammar.vocab))
    train_cfg = cfg.train_config
    log.info("distilling %d teacher(s) into a %d-parameter student (%s KL)",
             len(loaded), count_params(student_cfg), cfg.distill.objective)
    evaluator = _evaluator(data, train_cfg.seq_len, teacher=loaded[0])
    report = run_distillation(student_cfg, loaded, cfg.distill, train_cfg, cfg.optim, data.train,
                              evaluate=evaluator.callback(student_cfg), checkpoint_path=out / "student.ckpt")
    _write(out / "metrics.csv", metrics_csv(metric_rows(cfg.run.id, report.steps, report.epochs)))
    summary = _run_summary(cfg, data, report, student_cfg, {
        "distill": {**dataclasses.asdict(cfg.distill), "combination": cfg.distill.combination},
        "train": dataclasses.asdict(train_cfg),
        "optim": dataclasses.asdict(cfg.optim),
        "teachers": [p.name for p in teachers],
    })
    _write(out / "summary.json", dumps_json(summary))
    final = summary["final"]
    log.info("student done: perplexity %.3f, minimal-pair accuracy %.3f",
             final.get("perplexity", float("nan")), final.get("mp_accuracy", float("nan")))
    return summary


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    out = _out_dir(cfg, args.out)
    train_teachers(cfg, build_data(cfg), out)
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    out = _out_dir(cfg, args.out)
    paths = teacher_paths(cfg, out)
    distill(cfg, build_data(cfg), paths, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    out = _out_dir(cfg, args.out)
    weights, model_cfg = load_checkpoint(args.checkpoint)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    data = build_data(cfg)
    if model_cfg.vocab_size != len(data.grammar.vocab):
        raise ConfigError(f"checkpoint vocabulary ({model_cfg.vocab_size}) does not match the grammar "
                          f"({len(data.grammar.vocab)})")
    seq_len = min(cfg.train.seq_len, model_cfg.max_seq_len)
    if teacher is not None:
        seq_len = min(seq_len, teacher[1].max_seq_len)
    metrics = _evaluator(data, seq_len, teacher).metrics(weights, model_cfg)
    row = {"run_id": cfg.run.id, **metrics}
    stem = Path(args.checkpoint).stem
    _write(out / f"{stem}_eval.csv", metrics_csv([row]))
    _write(out / f"{stem}_eval.json", dumps_json({"checkpoint": Path(args.checkpoint).name,
                                                 "grammar_sha256": data.grammar.digest,
                                                 "held_out": data.held_out.provenance, **row}))
    if not args.quiet:
        sys.stdout.write(metrics_csv([row]))
    return EXIT_OK


def _comparison_row(name: str, cfg: ExperimentConfig, summary: Optional[dict]) -> dict:
    row = {
        "variant": name,
        "status": "ok" if summary is not None else "failed",
        "objective": cfg.distill.objective,
        "teacher_count": cfg.distill.teacher_count,
        "combination": cfg.distill.combination,
        "stepwise": cfg.distill.stepwise,
        "progressive": cfg.distill.progressive,
        "seed": cfg.run.seed,
    }
    if summary is not None:
        final = summary["final"]
        row.update(steps=summary["steps"], loss_total=summary["final_loss"],
                   epoch0_mp_accuracy=summary["epoch0"].get("mp_accuracy"),
                   **{k: final.get(k) for k in ("perplexity", "mp_accuracy", "mode_mass_m1", "mode_mass_m5")})
    return row


def comparison_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARISON_COLUMNS)
    for row in rows:
        writer.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                         for c in COMPARISON_COLUMNS])
    return buf.getvalue()


def cmd_compare(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    if not cfg.variants:
        raise ConfigError("a comparison grid needs at least one variant.NAME.section.key line")
    variants = {name: cfg.with_variant(name) for name in cfg.variants}
    out = _out_dir(cfg, args.out)
    data = build_data(cfg)
    teacher_dir = out / "teachers"
    if cfg.paths.teacher:
        teacher_dir = out
    else:
        teacher_dir.mkdir(parents=True, exist_ok=True)
        train_teachers(cfg, data, teacher_dir)

    rows, failures = [], []
    for name, vcfg in variants.items():
        log.info("variant %s", name)
        summary = None
        try:
            summary = distill(vcfg, data, teacher_paths(vcfg, teacher_dir), out / name)
        except (ValueError, RuntimeError, OSError) as exc:
            failures.append(name)
            log.error("variant %s failed: %s", name, exc)
        rows.append(_comparison_row(name, vcfg, summary))
    _write(out / "comparison.csv", comparison_csv(rows))
    if not args.quiet:
        sys.stdout.write(comparison_csv(rows))
    if failures:
        print(f"error: {len(failures)} variant(s) failed: {', '.join(failures)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revkd", description="Distil small language models on a synthetic grammar.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", help="output directory (default: run.out_dir)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--quiet", action="store_true", help="only report errors")

    common(sub.add_parser("train-teacher", help="train the teacher model(s) from scratch"))
    common(sub.add_parser("distill", help="distil trained teacher(s) into a student"))
    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out data")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--teacher", help="teacher checkpoint for mode-mass metrics")
    common(sub.add_parser("compare", help="train teachers once, then run every variant of a grid"))
    return parser


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr, force=True)
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointFormatError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        name = getattr(exc, "filename", None)
        detail = f"{exc.strerror}: {name}" if name and exc.strerror else str(exc)
        print(f"I/O error: {detail}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
