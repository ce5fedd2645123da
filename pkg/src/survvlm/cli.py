"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import Checkpoint
from .dataprep import (
    DataError,
    QAPairExtractor,
    SynthCohortConfig,
    generate_synth_cohort,
    load_templates,
    read_reports,
    train_test_split_ids,
    write_qa,
    write_reports,
    write_volume,
)
from .gradcheck import SELECTORS, gradcheck
from .model import ModelConfig, ModelParams
from .pipeline import (
    METRIC_KEYS,
    answer_f1,
    evaluate_risks,
    load_cohort_dir,
    patient_inputs,
    predict_risks,
    visual_tokens_for,
)
from .survstats import KM_HEADER, km_svg, write_cohort_csv, write_km_csv
from .text import Tokenizer
from .train import (
    NumericError,
    TrainConfig,
    build_training_data,
    fit_tokenizer,
    run_stage1,
    run_stage2,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = {"total": 1e-3, "total_discrete": 1e-3}

log = logging.getLogger("survvlm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers -----------------------------------------------------------------
def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


class Run:
    """Tracks inputs and outputs of one command and writes ``manifest.json``."""

    def __init__(self, args, inputs):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = [str(p) for p in inputs if p is not None]
        self.outputs: set[str] = set()
        self.started = _now()

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.add(rel)
        return p

    def finish(self, status: str = "ok", seed=None) -> None:
        missing = [o for o in self.outputs if not (self.out / o).exists()]
        if missing:
            raise RuntimeError(f"outputs missing at run end: {missing}")
        _write_json(self.out / "manifest.json", {
            "command": self.args.command,
            "config": self.args.config,
            "inputs": self.inputs,
            "out": str(self.out),
            "seed": seed,
            "version": __version__,
            "status": status,
            "started": self.started,
            "finished": _now(),
            "outputs": sorted(self.outputs),
        })


def _load_json(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text("utf-8"))
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return obj


def _train_config(args, stage: str) -> TrainConfig:
    raw = _load_json(args.config) if args.config else {}
    if raw.get("stage", stage) != stage:
        raise UsageError(f"config stage {raw['stage']!r} does not match command {args.command!r}")
    raw["stage"] = stage
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.total_steps is not None:
        raw["total_steps"] = args.total_steps
        raw["warmup_steps"] = min(raw.get("warmup_steps", TrainConfig.warmup_steps), args.total_steps)
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc


def _model_config(args, vocab_size: int, config: TrainConfig) -> ModelConfig:
    raw = _load_json(args.model_config) if args.model_config else {}
    raw.update(vocab_size=vocab_size, head=config.model_head, k_bins=config.k_bins)
    base = ModelConfig().to_dict()
    unknown = sorted(set(raw) - set(base))
    if unknown:
        raise UsageError(f"unknown model config keys: {', '.join(unknown)}")
    try:
        return ModelConfig.from_dict({**base, **raw})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model config: {exc}") from exc


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _templates(args):
    try:
        return load_templates(getattr(args, "templates", None))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"templates: {exc}") from exc


# -- commands ------------------------------------------------------------------
def cmd_prepare_data(args) -> int:
    run = Run(args, [args.reports, args.templates])
    reports = read_reports(args.reports)
    ext = QAPairExtractor(templates=_templates(args), top_k=args.top_k).fit(reports)
    write_qa(run.path("qa.jsonl"), ext.transform(reports))
    with open(run.path("word_freq.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "word", "count"])
        for rank, (word, count) in enumerate(ext.word_freq_, start=1):
            w.writerow([rank, word, count])
    run.finish()
    return EXIT_OK


def cmd_synth(args) -> int:
    run = Run(args, [args.config])
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = SynthCohortConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synth config: {exc}") from exc
    cohort = generate_synth_cohort(cfg)
    for pid, vol in cohort.volumes.items():
        write_volume(run.path(f"volumes/{pid}.json").with_suffix(""), vol, cfg.spacing_mm)
        run.outputs.add(f"volumes/{pid}.raw")
    write_reports(run.path("reports.jsonl"), cohort.reports)
    write_cohort_csv(run.path("cohort.csv"), cohort.records)
    with open(run.path("oracle_risks.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "risk"])
        for r, risk in zip(cohort.records, cohort.oracle_risks):
            w.writerow([r.patient_id, repr(float(risk))])
    train, test = train_test_split_ids([r.patient_id for r in cohort.records], args.test_fraction, cfg.seed)
    _write_json(run.path("split.json"), {"train": train, "test": test})
    run.finish(seed=cfg.seed)
    return EXIT_OK


def _metrics_log(run: Run, start_step: int):
    path = run.path("metrics.jsonl")
    kept = []
    if start_step > 0 and path.exists():
        kept = [ln for ln in path.read_text("utf-8").splitlines() if ln and json.loads(ln)["step"] <= start_step]
    fh = open(path, "w", encoding="utf-8", newline="\n")
    for ln in kept:
        fh.write(ln + "\n")
    return fh


def _train(args, stage: str) -> int:
    config = _train_config(args, stage)
    ckpt_in = args.resume or getattr(args, "checkpoint", None)
    run = Run(args, [args.config, args.data, ckpt_in, args.model_config])
    templates = _templates(args)
    if ckpt_in:
        init = _load_checkpoint(ckpt_in)
        if args.resume and init.stage != stage:
            raise UsageError(f"--resume needs a {stage} checkpoint, got {init.stage}")
        if stage == "Finetune" and not args.resume and init.stage != "Pretrain":
            raise UsageError(f"expected a Pretrain checkpoint, got {init.stage}")
        cohort = load_cohort_dir(args.data, init.params.config.volume_shape, templates)
        tokenizer = Tokenizer.from_vocab(init.vocab)
        questions = init.questions
    else:
        cohort = load_cohort_dir(args.data, None, templates)
        questions = [t.question for t in templates]
    train_ids = cohort.part("train")
    reports = cohort.subset(train_ids)
    if not reports:
        raise DataError("empty training corpus")
    if not ckpt_in:
        tokenizer = fit_tokenizer(reports, [q for q in cohort.qa if q.scan_id in set(train_ids)], questions)
        mc = _model_config(args, tokenizer.vocab_size, config)
        cohort = load_cohort_dir(args.data, mc.volume_shape, templates)
        init = Checkpoint(ModelParams.init(mc, config.seed), list(tokenizer.vocab_), list(questions), stage="Init", seed=config.seed)
    data = build_training_data(reports, cohort.qa, visual_tokens_for(init.params, cohort.volumes), tokenizer, questions)

    start = init.step if init.stage == stage else 0
    log_fh = _metrics_log(run, start)

    def on_step(entry):
        log_fh.write(json.dumps(entry.as_dict(), sort_keys=True) + "\n")

    def on_checkpoint(ck):
        ck.save(run.path(f"checkpoints/step_{ck.step:06d}.bin"))

    runner = run_stage1 if stage == "Pretrain" else run_stage2
    try:
        try:
            final, _ = runner(data, config, init, on_step, on_checkpoint)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    except NumericError as exc:
        log_fh.close()
        if exc.last_good is not None:
            exc.last_good.save(run.path("checkpoint.bin"))
        run.finish("numeric_failure", seed=config.seed)
        raise
    log_fh.close()
    final.save(run.path("checkpoint.bin"))
    run.finish(seed=config.seed)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _train(args, "Pretrain")


def cmd_finetune(args) -> int:
    if not args.checkpoint and not args.resume and not args.from_scratch:
        raise UsageError("finetune needs --checkpoint (a Pretrain checkpoint), --resume, or --from-scratch")
    if args.from_scratch and (args.checkpoint or args.resume):
        raise UsageError("--from-scratch cannot be combined with --checkpoint or --resume")
    return _train(args, "Finetune")


def _read_risks(path) -> dict[str, float]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 2 or header[0] != "patient_id":
            raise DataError(f"{path}: expected header patient_id,<risk>")
        for lineno, row in enumerate(reader, start=2):
            try:
                out[row[0]] = float(row[1])
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def cmd_evaluate(args) -> int:
    if not args.checkpoint and not args.risks:
        raise UsageError("evaluate needs --checkpoint or --risks")
    run = Run(args, [args.checkpoint, args.data, args.risks])
    ckpt = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    shape = ckpt.params.config.volume_shape if ckpt and not args.risks else None
    cohort = load_cohort_dir(args.data, shape)
    part = args.part or ("test" if cohort.split else "all")
    ids = [r.scan_id for r in cohort.reports] if part == "all" else cohort.part(part)
    records = cohort.records(ids)
    if len(records) < 2:
        raise DataError("cohort smaller than 2")
    f1 = None
    if args.risks:
        given = _read_risks(args.risks)
        if missing := [r.patient_id for r in records if r.patient_id not in given]:
            raise DataError(f"no risk for {missing[:3]}")
        risks = [given[r.patient_id] for r in records]
    else:
        tokenizer = Tokenizer.from_vocab(ckpt.vocab)
        qids = [tokenizer.encode_question(q) for q in ckpt.questions]
        by_id = {r.scan_id: r for r in cohort.reports}
        reps = [by_id[r.patient_id] for r in records]
        patients = patient_inputs(reps, visual_tokens_for(ckpt.params, {r.scan_id: cohort.volumes[r.scan_id] for r in reps}), tokenizer)
        risks = predict_risks(ckpt.params, patients, qids, args.threads)
        if args.max_answer_tokens > 0:
            f1 = answer_f1(ckpt.params, tokenizer, patients, qids, cohort.qa, args.max_answer_tokens, args.threads)
    ev = evaluate_risks(records, risks, f1)
    _write_json(run.path("metrics.json"), {k: ev.metrics[k] for k in METRIC_KEYS})
    with open(run.path("risks.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "risk", "group"])
        for r, risk, g in zip(records, risks, ev.groups):
            w.writerow([r.patient_id, repr(float(risk)), g.value])
    for name, curve in (("km_high.csv", ev.km_high), ("km_low.csv", ev.km_low)):
        if curve is None:
            run.path(name).write_text(",".join(KM_HEADER) + "\n", encoding="utf-8")
        else:
            write_km_csv(run.path(name), curve)
    if args.svg:
        curves = {k: c for k, c in (("High", ev.km_high), ("Low", ev.km_low)) if c is not None}
        run.path("km.svg").write_text(km_svg(curves), encoding="utf-8")
    run.finish(seed=ckpt.seed if ckpt else None)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = Run(args, [])
    selectors = SELECTORS if args.selector == "all" else (args.selector,)
    seed = args.seed or 0
    result = {}
    ok = True
    for s in selectors:
        err = max(gradcheck(s, seed + k) for k in range(args.n_configs))
        tol = GRADCHECK_TOLERANCE.get(s, 1e-4)
        result[s] = {"max_relative_error": err, "tolerance": tol, "pass": err < tol}
        ok &= err < tol
        print(f"{s}: {err:.3e} ({'PASS' if err < tol else 'FAIL'} < {tol:g})")
    _write_json(run.path("gradcheck.json"), result)
    run.finish("ok" if ok else "numeric_failure", seed=seed)
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    def add_global(p, suppress: bool):
        d = argparse.SUPPRESS if suppress else None
        p.add_argument("--config", default=d, help="JSON config for the command")
        p.add_argument("--out", default=argparse.SUPPRESS if suppress else ".", help="output directory")
        p.add_argument("--seed", type=int, default=d, help="unsigned 64-bit seed, overrides the config")
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1, help="worker and BLAS threads")

    parser = _Parser(prog="survvlm", description="Survival prediction with a small vision-language model.")
    parser.add_argument("--version", action="version", version=__version__)
    add_global(parser, False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare-data", help="reports -> QA pairs and word frequencies")
    add_global(p, True)
    p.add_argument("--reports", required=True, help="reports JSON Lines file")
    p.add_argument("--templates", help="question templates JSON (default: bundled)")
    p.add_argument("--top-k", type=int, default=100, help="rows in word_freq.csv")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("synth", help="generate a synthetic cohort with a known risk law")
    add_global(p, True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    for name, func, help_ in (("pretrain", cmd_pretrain, "stage 1: language-model pre-training"),
                              ("finetune", cmd_finetune, "stage 2: joint survival fine-tuning")):
        p = sub.add_parser(name, help=help_)
        add_global(p, True)
        p.add_argument("--data", required=True, help="cohort directory")
        p.add_argument("--model-config", help="JSON overrides for the model shape (fresh models only)")
        p.add_argument("--templates", help="question templates JSON (default: bundled)")
        p.add_argument("--total-steps", type=int, help="override total_steps")
        p.add_argument("--resume", help="checkpoint of this stage to continue from")
        if name == "finetune":
            p.add_argument("--checkpoint", help="Pretrain checkpoint to start from")
            p.add_argument("--from-scratch", action="store_true", help="start from a fresh initialisation")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="c-index, KM curves and log-rank test on a cohort")
    add_global(p, True)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--data", required=True, help="cohort directory")
    p.add_argument("--risks", help="CSV patient_id,risk to evaluate instead of a model")
    p.add_argument("--part", choices=("train", "test", "all"), help="split part (default: test when a split exists)")
    p.add_argument("--max-answer-tokens", type=int, default=32, help="0 skips answer generation")
    p.add_argument("--svg", action="store_true", help="also write km.svg")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="tape gradients vs. finite differences")
    add_global(p, True)
    p.add_argument("--selector", choices=("all",) + SELECTORS, default="all")
    p.add_argument("--n-configs", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("survvlm: error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        print("survvlm: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"survvlm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError) as exc:
        print(f"survvlm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"survvlm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
