"""Batch entry points: synth, ingest, warm-sampler, build-pairs, pretrain,
finetune, rerank, eval.

Every command resolves one configuration (profile defaults <- config file
<- flags), prints it with the seed, and embeds both into its outputs (as
checkpoint metadata or a .meta.json sidecar) for provenance.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from anchorrank import evalkit
from anchorrank.corpus import Vocabulary, build_vocab, clean_corpus, read_corpus, write_corpus
from anchorrank.encoder import EncoderConfig, load_checkpoint
from anchorrank.pretrain import TrainConfig, mlm_warmup, train
from anchorrank.ranker import (
    FinetuneConfig,
    examples_from_candidates,
    finetune,
    load_model,
    read_candidates,
    read_collection,
    read_queries,
    rerank,
)
from anchorrank.sampler import AttentionSampler, default_stopwords, load_stopwords
from anchorrank.synth import SynthConfig, synth_dataset
from anchorrank.taskgen import PairGenerator, TaskGenConfig, read_pairs, write_pairs

log = logging.getLogger(__name__)

PRODUCERS = {
    "corpus": "synth",
    "corpus_clean": "ingest",
    "vocab": "ingest",
    "sampler_ckpt": "warm-sampler",
    "pairs": "build-pairs",
    "pretrain_ckpt": "pretrain",
    "finetune_ckpt": "finetune",
    "run": "rerank",
    "collection": "synth",
    "eval_queries": "synth",
    "eval_qrels": "synth",
    "eval_candidates": "synth",
    "train_queries": "synth",
    "train_qrels": "synth",
    "train_candidates": "synth",
}

DEFAULTS = {
    "seed": None,
    "profile": "toy",
    "workdir": "work",
    "stopwords": None,
    "paths": {},
    "corpus": {"min_words": 100, "vocab_size": 1000},
    "encoder": {"layers": 2, "heads": 4, "hidden": 64, "ffn_dim": 256, "max_len": 48, "dropout": 0.0},
    "taskgen": {"lam": 3.0, "summary_max_tokens": 32, "per_task_cap": {"rdp": 100, "acm": 200}, "pair_budget": None},
    "warmup": {"lr": 1e-3, "epochs": 2, "batch_size": 8, "max_steps": 150, "log_every": 50},
    "pretrain": {
        "lam": 3.0,
        "lr": 1e-3,
        "epochs": 20,
        "batch_size": 8,
        "max_steps": 800,
        "log_every": 25,
        "task_weights": {"rqp": 1.0, "qdm": 1.0, "rdp": 1.0, "acm": 1.0, "mlm": 1.0},
    },
    "finetune": {"lr": 5e-4, "epochs": 25, "warmup": 0.1, "batch_size": 8, "max_steps": None, "log_every": 50},
    "rerank": {"k": 10},
    "eval": {"ks": [10, 100]},
    "synth": {"pages": 200, "topics": 8, "train_queries": 100, "eval_queries": 50, "candidates_per_query": 10},
}

# larger training constants (batch 128, 10 epochs, lr 1e-4) on the same small encoder
FULL_PROFILE = {
    "corpus": {"min_words": 100, "vocab_size": 5000},
    "encoder": {"layers": 2, "heads": 4, "hidden": 64, "ffn_dim": 256, "max_len": 512, "dropout": 0.0},
    "taskgen": {"summary_max_tokens": 512, "per_task_cap": None, "pair_budget": None},
    "warmup": {"lr": 1e-4, "epochs": 1, "batch_size": 32, "max_steps": None},
    "pretrain": {"lr": 1e-4, "epochs": 10, "batch_size": 128, "max_steps": None},
    "finetune": {"lr": 1e-5, "epochs": 2, "warmup": 0.1, "batch_size": 128, "max_steps": None},
}

DEFAULT_FILENAMES = {
    "corpus": "corpus.jsonl",
    "corpus_clean": "clean.jsonl",
    "vocab": "vocab.txt",
    "sampler_ckpt": "sampler.ckpt",
    "pairs": "pairs.jsonl",
    "pretrain_ckpt": "pretrained.ckpt",
    "pretrain_metrics": "pretrain_metrics.jsonl",
    "finetune_ckpt": "finetuned.ckpt",
    "collection": "collection.jsonl",
    "train_queries": "train_queries.tsv",
    "train_qrels": "train_qrels.txt",
    "train_candidates": "train_candidates.txt",
    "eval_queries": "eval_queries.tsv",
    "eval_qrels": "eval_qrels.txt",
    "eval_candidates": "eval_candidates.txt",
    "run": "rerank.run",
    "metrics": "metrics.json",
}


class CommandError(RuntimeError):
    pass


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    profile = getattr(args, "profile", None)
    file_cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CommandError(f"config file {path} not found")
        file_cfg = json.loads(path.read_text(encoding="utf-8"))
        profile = profile or file_cfg.get("profile")
    profile = profile or cfg["profile"]
    if profile == "full":
        cfg = _deep_merge(cfg, FULL_PROFILE)
    elif profile != "toy":
        raise CommandError(f"unknown profile {profile!r} (expected toy or full)")
    cfg = _deep_merge(cfg, file_cfg)
    cfg["profile"] = profile
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "workdir", None) is not None:
        cfg["workdir"] = args.workdir
    if cfg["seed"] is None:
        raise CommandError("a seed is mandatory: pass --seed or set it in the config file")
    return cfg


def resolve_path(cfg: dict, key: str, override: str | None = None) -> Path:
    if override:
        return Path(override)
    if key in cfg.get("paths", {}):
        return Path(cfg["paths"][key])
    return Path(cfg["workdir"]) / DEFAULT_FILENAMES[key]


def require_input(path: Path, key: str) -> Path:
    if not path.exists():
        producer = PRODUCERS.get(key, "an earlier command")
        raise CommandError(f"missing input {path} ({key}); produce it with `anchorrank {producer}`")
    return path


def announce(command: str, cfg: dict) -> None:
    print(f"[anchorrank {command}] seed={cfg['seed']} profile={cfg['profile']}")
    print(json.dumps(cfg, indent=2, sort_keys=True))


def write_sidecar(path: Path, command: str, cfg: dict) -> None:
    meta = {"command": command, "seed": cfg["seed"], "config": cfg}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def encoder_config(cfg: dict, vocab_size: int) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(
        layers=e["layers"],
        heads=e["heads"],
        hidden=e["hidden"],
        ffn_dim=e["ffn_dim"],
        vocab_size=vocab_size,
        max_len=e["max_len"],
        dropout=e.get("dropout", 0.0),
    )


def stopword_set(cfg: dict):
    if cfg.get("stopwords"):
        return load_stopwords(cfg["stopwords"])
    return default_stopwords()


def train_config(section: dict, cfg: dict, task_weights=None) -> TrainConfig:
    return TrainConfig(
        lam=section.get("lam", cfg["taskgen"]["lam"]),
        lr=section["lr"],
        epochs=section["epochs"],
        batch_size=section["batch_size"],
        seed=cfg["seed"],
        max_len=cfg["encoder"]["max_len"],
        task_weights=dict(task_weights if task_weights is not None else section.get("task_weights", {})),
        summary_max_tokens=cfg["taskgen"]["summary_max_tokens"],
        log_every=section.get("log_every", 50),
        max_steps=section.get("max_steps"),
    )


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    announce("synth", cfg)
    s = cfg["synth"]
    synth_cfg = SynthConfig(
        pages=s["pages"],
        topics=s["topics"],
        train_queries=s["train_queries"],
        eval_queries=s["eval_queries"],
        candidates_per_query=s["candidates_per_query"],
        seed=cfg["seed"],
    )
    out_dir = Path(args.out) if args.out else Path(cfg["workdir"])
    paths = synth_dataset(out_dir, synth_cfg)
    write_sidecar(paths["corpus"], "synth", cfg)
    print(f"wrote synthetic dataset under {out_dir}")
    return 0


def cmd_ingest(args) -> int:
    cfg = resolve_config(args)
    announce("ingest", cfg)
    corpus_path = require_input(resolve_path(cfg, "corpus", args.corpus), "corpus")
    corpus = read_corpus(corpus_path)
    cleaned = clean_corpus(corpus, min_words=cfg["corpus"]["min_words"])
    if len(cleaned) == 0:
        raise CommandError("cleaning removed every page; lower corpus.min_words")
    vocab = build_vocab(cleaned, max_size=cfg["corpus"]["vocab_size"])
    clean_path = resolve_path(cfg, "corpus_clean", args.out)
    clean_path.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(cleaned, clean_path)
    vocab_path = resolve_path(cfg, "vocab")
    vocab.save(vocab_path)
    write_sidecar(clean_path, "ingest", cfg)
    print(f"cleaned corpus: {cleaned.counts()} -> {clean_path}")
    print(f"vocabulary: {len(vocab)} terms -> {vocab_path}")
    return 0


def _load_clean_corpus_and_vocab(cfg: dict):
    corpus = read_corpus(require_input(resolve_path(cfg, "corpus_clean"), "corpus_clean"))
    vocab = Vocabulary.load(require_input(resolve_path(cfg, "vocab"), "vocab"))
    return corpus, vocab


def cmd_warm_sampler(args) -> int:
    cfg = resolve_config(args)
    announce("warm-sampler", cfg)
    corpus, vocab = _load_clean_corpus_and_vocab(cfg)
    enc = encoder_config(cfg, len(vocab))
    weights = {"rqp": 0.0, "qdm": 0.0, "rdp": 0.0, "acm": 0.0, "mlm": 1.0}
    tcfg = train_config(cfg["warmup"], cfg, task_weights=weights)
    out = resolve_path(cfg, "sampler_ckpt", args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mlm_warmup(corpus, enc, tcfg, vocab, checkpoint_path=out)
    print(f"sampler checkpoint -> {out}")
    return 0


def cmd_build_pairs(args) -> int:
    cfg = resolve_config(args)
    announce("build-pairs", cfg)
    corpus, vocab = _load_clean_corpus_and_vocab(cfg)
    ckpt_path = require_input(resolve_path(cfg, "sampler_ckpt"), "sampler_ckpt")
    ck = load_checkpoint(ckpt_path, expected_config=encoder_config(cfg, len(vocab)))
    sampler = AttentionSampler(ck.params, ck.config, vocab, stopwords=stopword_set(cfg))
    gen_cfg = TaskGenConfig(
        lam=cfg["taskgen"]["lam"],
        summary_max_tokens=cfg["taskgen"]["summary_max_tokens"],
        per_task_cap=cfg["taskgen"]["per_task_cap"],
        pair_budget=cfg["taskgen"]["pair_budget"],
        seed=cfg["seed"],
    )
    pairs = PairGenerator(corpus, sampler, gen_cfg).generate()
    if not pairs:
        raise CommandError("no pairs were generated; corpus has too few usable anchors")
    out = resolve_path(cfg, "pairs", args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = write_pairs(pairs, out)
    write_sidecar(out, "build-pairs", cfg)
    by_task = {t: sum(1 for p in pairs if p.task == t) for t in ("rqp", "qdm", "rdp", "acm")}
    print(f"{count} pairs ({by_task}) -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    announce("pretrain", cfg)
    corpus, vocab = _load_clean_corpus_and_vocab(cfg)
    pairs = read_pairs(require_input(resolve_path(cfg, "pairs"), "pairs"))
    enc = encoder_config(cfg, len(vocab))
    tcfg = train_config(cfg["pretrain"], cfg)
    init = None
    if args.init:
        init = load_checkpoint(Path(args.init), expected_config=enc).params
    out = resolve_path(cfg, "pretrain_ckpt", args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics_path = resolve_path(cfg, "pretrain_metrics")
    train(
        pairs,
        corpus,
        enc,
        tcfg,
        vocab,
        init=init,
        checkpoint_path=out,
        metrics_path=metrics_path,
        extra_meta={"seed": cfg["seed"], "command": "pretrain"},
    )
    print(f"pre-trained checkpoint -> {out}")
    print(f"metrics log -> {metrics_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    announce("finetune", cfg)
    ckpt = require_input(Path(args.init) if args.init else resolve_path(cfg, "pretrain_ckpt"), "pretrain_ckpt")
    model = load_model(ckpt)
    collection = read_collection(require_input(resolve_path(cfg, "collection"), "collection"))
    queries = read_queries(require_input(resolve_path(cfg, "train_queries"), "train_queries"))
    qrels = evalkit.read_qrels(require_input(resolve_path(cfg, "train_qrels"), "train_qrels"))
    candidates = read_candidates(require_input(resolve_path(cfg, "train_candidates"), "train_candidates"))
    examples = examples_from_candidates(queries, candidates, qrels)
    if not examples:
        raise CommandError("no fine-tuning examples; check the train queries/candidates/qrels files")
    f = cfg["finetune"]
    fcfg = FinetuneConfig(
        lr=f["lr"],
        epochs=f["epochs"],
        warmup=f["warmup"],
        batch_size=f["batch_size"],
        seed=cfg["seed"],
        max_len=cfg["encoder"]["max_len"],
        log_every=f.get("log_every", 50),
        max_steps=f.get("max_steps"),
    )
    out = resolve_path(cfg, "finetune_ckpt", args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    finetune(model, examples, collection, fcfg, checkpoint_path=out)
    print(f"fine-tuned checkpoint ({len(examples)} examples) -> {out}")
    return 0


def cmd_rerank(args) -> int:
    cfg = resolve_config(args)
    announce("rerank", cfg)
    ckpt = require_input(Path(args.init) if args.init else resolve_path(cfg, "finetune_ckpt"), "finetune_ckpt")
    model = load_model(ckpt)
    collection = read_collection(require_input(resolve_path(cfg, "collection"), "collection"))
    queries = read_queries(require_input(resolve_path(cfg, "eval_queries"), "eval_queries"))
    candidates = read_candidates(require_input(resolve_path(cfg, "eval_candidates"), "eval_candidates"))
    k = cfg["rerank"]["k"]
    run: evalkit.RankedRun = {}
    for qid in sorted(candidates):
        if qid not in queries:
            raise CommandError(f"candidate query {qid!r} missing from queries file")
        run[qid] = rerank(model, queries[qid], candidates[qid], k=k, collection=collection)
    out = resolve_path(cfg, "run", args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evalkit.write_run(run, out, tag=f"anchorrank-seed{cfg['seed']}")
    write_sidecar(out, "rerank", cfg)
    print(f"run over {len(run)} queries -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    announce("eval", cfg)
    run = evalkit.read_run(require_input(resolve_path(cfg, "run"), "run"))
    qrels = evalkit.read_qrels(require_input(resolve_path(cfg, "eval_qrels"), "eval_qrels"))
    report = evalkit.evaluate(run, qrels, ks=tuple(cfg["eval"]["ks"]))
    print(evalkit.format_report(report))
    out = resolve_path(cfg, "metrics", args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    record = {"command": "eval", "seed": cfg["seed"], "metrics": report, "config": cfg}
    out.write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
    print(f"metrics record -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorrank",
        description="Hyperlink-derived pre-training and document reranking pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_help: str | None = None) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="random seed (mandatory here or in the config)")
        p.add_argument("--profile", choices=["toy", "full"], help="preset profile")
        p.add_argument("--workdir", help="artifact directory (default ./work)")
        if out_help:
            p.add_argument("--out", help=out_help)

    p = sub.add_parser("synth", help="generate the bundled synthetic topic corpus and retrieval splits")
    common(p, out_help="output directory (default workdir)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse + clean the corpus and build the vocabulary")
    common(p, out_help="cleaned corpus path")
    p.add_argument("--corpus", help="raw corpus JSONL path")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("warm-sampler", help="MLM-only warm-up producing the fixed sampling checkpoint")
    common(p, out_help="sampler checkpoint path")
    p.set_defaults(func=cmd_warm_sampler)

    p = sub.add_parser("build-pairs", help="construct the four-task pre-training pairs file")
    common(p, out_help="pairs file path")
    p.set_defaults(func=cmd_build_pairs)

    p = sub.add_parser("pretrain", help="joint pairwise + MLM pre-training")
    common(p, out_help="checkpoint path")
    p.add_argument("--init", help="optional checkpoint to initialize from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="pointwise cross-entropy fine-tuning on the train split")
    common(p, out_help="checkpoint path")
    p.add_argument("--init", help="checkpoint to initialize from (default: pretrain output)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("rerank", help="rerank the eval candidate lists")
    common(p, out_help="run file path")
    p.add_argument("--init", help="checkpoint to rerank with (default: finetune output)")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="score a run against qrels (MRR@k, nDCG@k)")
    common(p, out_help="metrics record path")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
