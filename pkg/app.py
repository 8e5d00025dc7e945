"""
parablock command line
Data pipeline, curriculum training, VLM training and run reports behind one entry point

Exit codes: 0 success, 1 invalid input (bad files, configs or records), 2 runtime failure
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from tqdm import tqdm

from checkpointing import CheckpointStore, checkpoint_load
from config import (
    CACHE_DIR, DEBUG_MODE, DEFAULT_SCALE, DEFAULT_SEED, DEFAULT_WORKERS, LOG_FORMAT, LOG_LEVEL, PLANS_DIR, RULES_DIR,
)
from conversation_trees import flatten_corpus, load_trees, overhead_summary
from corpus_filters import (
    CodeFilterConfig, CodeSample, StopWordLanguageScorer, annotate_code_sample, code_filter, filter_corpus,
    load_rule_sets, read_text_documents,
)
from model_core import ParallelLM, get_preset
from run_reports import REPORT_FILE, RunReport, export_report
from sequence_packing import pack_sequences, read_documents, write_pack_shards
from substring_dedup import DEFAULT_MIN_LEN, deduplicate_documents
from synthetic_data import color_caption_records
from tokenizer import ByteTokenizer
from trainer import CurriculumPlan, TrainingData, run_curriculum
from vlm_extension import EncoderConfig, GridPolicy, VlmState, load_vlm, load_vlm_records, save_vlm, vlm_train_stage

logger = logging.getLogger("parablock")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

DEFAULT_PLAN = os.path.join(PLANS_DIR, "desk_curriculum.json")
PLAN_FILE = "plan.json"
RUN_FILE = "run.json"
CHECKPOINT_DIR = "checkpoints"


def configure_logging(level: str = LOG_LEVEL):
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level.upper())


@dataclass
class RunConfig:
    """Resolved command-line options; required input paths must exist"""
    command: str
    inputs: List[str] = field(default_factory=list)
    output: Optional[str] = None
    plan: Optional[str] = None
    seed: int = DEFAULT_SEED
    scale: Optional[float] = None
    workers: int = DEFAULT_WORKERS
    options: Dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [p for p in self.inputs + ([self.plan] if self.plan else []) if not os.path.exists(p)]
        if missing:
            raise FileNotFoundError(f"{self.command}: missing input {', '.join(missing)}")
        if self.workers < 1:
            raise ValueError(f"--workers must be >= 1, got {self.workers}")
        if self.scale is not None and not self.scale > 0:
            raise ValueError(f"--scale must be positive, got {self.scale}")

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        known = {"command", "input", "output", "plan", "seed", "scale", "workers", "log_level", "handler"}
        inputs = [p for p in (getattr(args, "input", None), getattr(args, "data", None),
                              getattr(args, "run", None), getattr(args, "from_ckpt", None),
                              getattr(args, "init", None)) if p]
        return cls(command=args.command, inputs=inputs, output=getattr(args, "output", None),
                   plan=getattr(args, "plan", None), seed=getattr(args, "seed", DEFAULT_SEED),
                   scale=getattr(args, "scale", None), workers=getattr(args, "workers", DEFAULT_WORKERS),
                   options={k: v for k, v in vars(args).items() if k not in known})


def _write_jsonl(path: str, records):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def _read_jsonl(path: str) -> List[Dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# Data pipeline

def cmd_filter(cfg: RunConfig) -> int:
    rule_sets = load_rule_sets(cfg.options.get("rules") or RULES_DIR)
    if cfg.options.get("code"):
        scorer = StopWordLanguageScorer(rule_sets)
        kept, verdicts = [], {}
        for record in _read_jsonl(cfg.inputs[0]):
            sample = annotate_code_sample(CodeSample(record["text"], record["programming_language"],
                                                     id=str(record.get("id", ""))), scorer)
            verdict = code_filter(sample, CodeFilterConfig())
            reason = verdict.reason.value if verdict.reason else "kept"
            verdicts[reason] = verdicts.get(reason, 0) + 1
            if verdict.passed:
                kept.append(dict(record, natural_language=sample.natural_language,
                                 language_score=sample.language_score))
        if cfg.output:
            _write_jsonl(cfg.output, kept)
        print(json.dumps(verdicts, indent=2, sort_keys=True))
        return EXIT_OK

    documents = read_text_documents(cfg.inputs[0])
    kept, report = filter_corpus(documents, rule_sets, workers=cfg.workers)
    if cfg.output:
        _write_jsonl(cfg.output, [d.to_record() for d in kept])
    if cfg.options.get("report"):
        report.to_csv(cfg.options["report"])
        with open(os.path.splitext(cfg.options["report"])[0] + ".json", "w", encoding="utf-8") as f:
            f.write(report.to_json())
    print(report.to_dataframe().round(2).to_string(index=False))
    return EXIT_OK


def cmd_flatten(cfg: RunConfig) -> int:
    trees = load_trees(cfg.inputs[0])
    threads = flatten_corpus(trees, workers=cfg.workers, max_len=cfg.options.get("max_len"))
    if cfg.output:
        _write_jsonl(cfg.output, [t.to_record() for t in threads])
    summary = overhead_summary(trees, cfg.options.get("max_len"))
    if cfg.options.get("summary"):
        with open(cfg.options["summary"], "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
    logger.info("flattened %d trees into %d threads (%d truncated)", len(trees), len(threads),
                sum(t.truncated for t in threads))
    untrained = sum(row["untrained_tokens"] for row in summary.values())
    if untrained:
        logger.warning("%d message tokens fall past --max-len in every thread and get no loss", untrained)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_dedup(cfg: RunConfig) -> int:
    documents = read_documents(cfg.inputs[0])
    kept, result = deduplicate_documents(documents, min_len=cfg.options.get("min_len") or DEFAULT_MIN_LEN)
    if cfg.output:
        _write_jsonl(cfg.output, [{"id": d.doc_id, "source": d.source, "tokens": d.tokens.tolist(),
                                   "loss_mask": d.loss_mask.tolist()} for d in kept])
    print(json.dumps({"documents": len(kept), "removed_tokens": result.removed_tokens,
                      "total_tokens": result.total_tokens, "removal_rate": result.removal_rate}, indent=2))
    return EXIT_OK


def cmd_pack(cfg: RunConfig) -> int:
    context = cfg.options["context"]
    stem = os.path.splitext(os.path.basename(cfg.inputs[0]))[0]
    out_dir = cfg.output or os.path.join(CACHE_DIR, "packs", f"{stem}-ctx{context}")
    documents = read_documents(cfg.inputs[0])
    samples = pack_sequences(documents, context, pad_id=cfg.options.get("pad_id", ByteTokenizer.PAD))
    manifest = write_pack_shards(samples, out_dir, shard_size=cfg.options.get("shard_size") or 1024)
    real = sum(s.n_real_tokens for s in samples)
    print(json.dumps({"samples": len(samples), "real_tokens": real,
                      "fill": real / (len(samples) * context) if samples else 0.0,
                      "manifest": manifest}, indent=2))
    return EXIT_OK


# Training

def _training_data(data_path: Optional[str]) -> Optional[TrainingData]:
    if not data_path:
        return None
    return TrainingData.from_documents(read_documents(data_path), pad_id=ByteTokenizer.PAD)


def _train(plan: CurriculumPlan, run_dir: str, seed: int, data_path: Optional[str], state=None,
           halt_at_tokens: Optional[int] = None, progress: bool = True) -> int:
    store = CheckpointStore(os.path.join(run_dir, CHECKPOINT_DIR))
    report = RunReport(os.path.join(run_dir, REPORT_FILE))
    result = run_curriculum(plan, seed=seed, data=_training_data(data_path), store=store, report=report,
                            state=state, halt_at_tokens=halt_at_tokens, progress=progress)
    summary = {"tokens_seen": result.state.tokens_seen, "steps": result.state.step, "stage": result.state.stage_id,
               "spike_count": result.state.spike_count, "halted": result.halted}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.output:
        raise ValueError("train: --out directory is required")
    plan = CurriculumPlan.from_file(cfg.plan or DEFAULT_PLAN, scale=cfg.scale)
    os.makedirs(cfg.output, exist_ok=True)
    plan.save(os.path.join(cfg.output, PLAN_FILE))
    data_path = os.path.abspath(cfg.options["data"]) if cfg.options.get("data") else None
    with open(os.path.join(cfg.output, RUN_FILE), "w", encoding="utf-8") as f:
        json.dump({"seed": cfg.seed, "scale": plan.scale, "data": data_path}, f, indent=2)
    logger.info("training plan %s at scale %g into %s (%d tokens)", plan.name, plan.scale, cfg.output,
                plan.total_tokens)
    return _train(plan, cfg.output, cfg.seed, data_path, halt_at_tokens=cfg.options.get("halt_at_tokens"),
                  progress=not cfg.options.get("quiet"))


def cmd_resume(cfg: RunConfig) -> int:
    ckpt_dir = os.path.abspath(cfg.options["from_ckpt"].rstrip(os.sep))
    run_dir = os.path.dirname(os.path.dirname(ckpt_dir))
    for name in (PLAN_FILE, RUN_FILE):
        if not os.path.exists(os.path.join(run_dir, name)):
            raise FileNotFoundError(f"resume: {name} not found in run directory {run_dir}")
    with open(os.path.join(run_dir, RUN_FILE), "r", encoding="utf-8") as f:
        run = json.load(f)
    plan = CurriculumPlan.from_file(os.path.join(run_dir, PLAN_FILE))
    state = checkpoint_load(ckpt_dir)
    logger.info("resuming %s from %s at %d tokens (stage %d)", run_dir, os.path.basename(ckpt_dir),
                state.tokens_seen, state.stage_id)
    return _train(plan, run_dir, run["seed"], run.get("data"), state=state,
                  halt_at_tokens=cfg.options.get("halt_at_tokens"), progress=not cfg.options.get("quiet"))


def cmd_vlm_train(cfg: RunConfig) -> int:
    if not cfg.output:
        raise ValueError("vlm-train: --out directory is required")
    stage = cfg.options["stage"]
    if cfg.options.get("init"):
        state = load_vlm(cfg.options["init"])
    else:
        if stage == "finetune":
            logger.warning("finetune without --init starts from an untrained projector")
        model = ParallelLM.init(get_preset(cfg.options.get("model") or "desk-stage1"), seed=cfg.seed)
        encoder = EncoderConfig(image_size=cfg.options["image_size"], patch_size=14, feature_dim=32, seed=cfg.seed)
        state = VlmState.init(model, encoder, seed=cfg.seed, policy=GridPolicy(base_resolution=cfg.options["image_size"]))
    if cfg.options.get("data"):
        records = load_vlm_records(cfg.options["data"])
    else:
        records = color_caption_records(64, image_size=state.encoder.config.image_size, seed=cfg.seed,
                                        multi_turn=stage == "finetune")
    steps = cfg.options["steps"]
    with tqdm(total=steps, desc=f"vlm {stage}", disable=bool(cfg.options.get("quiet"))) as bar:
        vlm_train_stage(stage, records, state, steps, lr=cfg.options["lr"], batch_size=cfg.options["batch_size"],
                        progress_callback=lambda step, loss: (bar.update(1), bar.set_postfix(loss=f"{loss:.3f}")))
    save_vlm(state, cfg.output)
    print(json.dumps({"stage": stage, "steps": state.step, "first_loss": state.losses[0] if state.losses else None,
                      "last_loss": state.losses[-1] if state.losses else None}, indent=2))
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    written = export_report(cfg.options["run"], cfg.output, plot=not cfg.options.get("no_plot"))
    print(json.dumps(written, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parablock", description="Parallel-block LM training recipe at desk scale")
    parser.add_argument("--log-level", default=LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="line-wise and heuristic web-text filtering with a rate report")
    p.add_argument("--input", required=True, help="JSONL records {id, lang, text}")
    p.add_argument("--output", help="JSONL of kept documents")
    p.add_argument("--rules", help=f"rule-set directory (default {RULES_DIR})")
    p.add_argument("--report", help="CSV path for the per-language report (a .json copy is written alongside)")
    p.add_argument("--code", action="store_true", help="input is code {id, text, programming_language}")
    p.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser("flatten", help="flatten conversation trees into masked threads")
    p.add_argument("--input", required=True, help="JSONL tree records")
    p.add_argument("--output", help="JSONL of flattened threads")
    p.add_argument("--summary", help="JSON path for the per-source overhead summary")
    p.add_argument("--max-len", type=int, help="truncate threads to this many tokens")
    p.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    p.set_defaults(handler=cmd_flatten)

    p = sub.add_parser("dedup", help="remove repeated token spans across documents")
    p.add_argument("--input", required=True, help="JSONL records {id, source, text | tokens}")
    p.add_argument("--output", help="JSONL of deduplicated token documents")
    p.add_argument("--min-len", type=int, default=DEFAULT_MIN_LEN)
    p.set_defaults(handler=cmd_dedup)

    p = sub.add_parser("pack", help="pack documents into context windows and write binary shards")
    p.add_argument("--input", required=True, help="JSONL records {id, source, text | tokens}")
    p.add_argument("--output", help="shard directory (default: under PARABLOCK_CACHE_DIR)")
    p.add_argument("--context", type=int, required=True)
    p.add_argument("--shard-size", type=int, default=1024)
    p.add_argument("--pad-id", type=int, default=ByteTokenizer.PAD)
    p.set_defaults(handler=cmd_pack)

    p = sub.add_parser("train", help="run a staged curriculum")
    p.add_argument("--plan", help=f"stage-plan file (default {DEFAULT_PLAN})")
    p.add_argument("--scale", type=float, help=f"GT-to-token scale (plan default, usually {DEFAULT_SCALE:g})")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", dest="output", required=True, help="run directory")
    p.add_argument("--data", help="JSONL documents with a source field (default: synthetic mixture)")
    p.add_argument("--halt-at-tokens", type=int, help="save a halt checkpoint and stop here")
    p.add_argument("--quiet", action="store_true", help="no progress bar")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("resume", help="continue a run from one of its checkpoints")
    p.add_argument("--from", dest="from_ckpt", required=True, help="checkpoint directory inside a run")
    p.add_argument("--halt-at-tokens", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(handler=cmd_resume)

    p = sub.add_parser("vlm-train", help="train the multimodal projector (pretrain) or projector + LLM (finetune)")
    p.add_argument("--stage", choices=("pretrain", "finetune"), required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--init", help="VLM directory written by an earlier vlm-train")
    p.add_argument("--data", help="JSONL {id, image, instruction, response, turns}")
    p.add_argument("--model", help="model preset for a fresh LLM (default desk-stage1)")
    p.add_argument("--image-size", type=int, default=56)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(handler=cmd_vlm_train)

    p = sub.add_parser("report", help="loss curve, doubling markers and spike counts for a run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--out", dest="output", help="output directory (default: the run directory)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        cfg = RunConfig.from_args(args)
        return args.handler(cfg)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        logger.error("%s: %s", args.command, exc)
        if DEBUG_MODE:
            logger.exception("details")
        return EXIT_INVALID
    except (RuntimeError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        if DEBUG_MODE:
            logger.exception("details")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
