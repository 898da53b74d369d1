"""Command-line entry points.

Every subcommand takes ``--config FILE`` (YAML), ``--set key=value`` and one
``--<key>`` flag per configuration field. Later sources win: file, then flags,
then ``--set``. Failures exit nonzero with a stage tag on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import yaml

from . import checkpoint
from . import config as config_mod
from .config import FIELD_NAMES, PipelineConfig

log = logging.getLogger("layerprune")


class CLIError(Exception):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(message)


def _corpus_spec(cfg: PipelineConfig):
    from .harness import SyntheticCorpusSpec

    return SyntheticCorpusSpec(
        kind=cfg.corpus_kind,
        vocab=cfg.vocab,
        length=cfg.corpus_length,
        seed=cfg.corpus_seed,
        branching=cfg.markov_branching,
        copy_min=cfg.copy_min,
        copy_max=cfg.copy_max,
        modulus=cfg.modulus,
    )


def _need(cfg: PipelineConfig, key: str, stage: str) -> str:
    value = getattr(cfg, key)
    if not value:
        raise CLIError(stage, f"--{key.replace('_', '-')} is required")
    return value


def _out(args, stage: str) -> Path:
    if not args.out:
        raise CLIError(stage, "--out is required")
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_corpus(cfg: PipelineConfig, args) -> None:
    from .harness import gen_corpus

    corpus = gen_corpus(_corpus_spec(cfg))
    corpus.save(_out(args, "gen-corpus"))
    log.info("corpus: %d train / %d held-out tokens", corpus.train.size, corpus.heldout.size)


def cmd_train_teacher(cfg: PipelineConfig, args) -> None:
    from .harness import Corpus, train_teacher
    from .model import save_checkpoint

    corpus = Corpus.load(_need(cfg, "corpus", "train-teacher"))
    out = _out(args, "train-teacher")
    res = train_teacher(cfg, corpus)
    save_checkpoint(out, res.params, extra={"heldout_ppl": res.heldout_ppl, "untrained_ppl": res.untrained_ppl})
    print(json.dumps({"heldout_ppl": res.heldout_ppl, "untrained_ppl": res.untrained_ppl}, sort_keys=True))


def cmd_importance(cfg: PipelineConfig, args) -> None:
    from .harness import Corpus
    from .importance import CalibrationSet, bi_scores, kl_layer_importance, write_scores_csv
    from .model import load_checkpoint
    from .sampler import mix_seed

    teacher = load_checkpoint(_need(cfg, "teacher", "importance"))
    corpus = Corpus.load(_need(cfg, "corpus", "importance"))
    calib = CalibrationSet.from_stream(corpus.train, cfg.calib_count, cfg.seq_len, seed=mix_seed(cfg.seed, 3))
    kl = kl_layer_importance(teacher, calib)
    bi = bi_scores(teacher, calib)
    write_scores_csv(_out(args, "importance"), kl, bi, teacher.config.protected)


def cmd_dump_logits(cfg: PipelineConfig, args) -> None:
    from .distill import dump_topk_logits
    from .harness import Corpus
    from .model import load_checkpoint

    teacher = load_checkpoint(_need(cfg, "teacher", "dump-logits"))
    corpus = Corpus.load(_need(cfg, "corpus", "dump-logits"))
    cache = dump_topk_logits(teacher, corpus.train, cfg.K, cfg.seq_len)
    cache.save(_out(args, "dump-logits"))


def cmd_prune(cfg: PipelineConfig, args) -> None:
    from .pipeline import Interrupted, run

    _need(cfg, "run_dir", "prune")
    try:
        art = run(cfg, resume=args.resume, stop_at=args.stop_at)
    except Interrupted as exc:
        print(json.dumps({"interrupted": str(exc)}))
        return
    last = art.metrics[-1] if art.metrics else {}
    print(
        json.dumps(
            {"mask": [int(m) for m in art.mask], "final_loss": last.get("loss"), "eval_ppl": last.get("eval_ppl")},
            sort_keys=True,
        )
    )


def cmd_oracle(cfg: PipelineConfig, args) -> None:
    from .harness import Corpus, oracle_batch, oracle_best_mask
    from .model import load_checkpoint

    teacher = load_checkpoint(_need(cfg, "teacher", "oracle"))
    corpus = Corpus.load(_need(cfg, "corpus", "oracle"))
    inputs, targets = oracle_batch(corpus.train, cfg.oracle_batch, cfg.seq_len, cfg.seed)
    res = oracle_best_mask(teacher, inputs, targets, cfg.k, cfg.protected_layers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "mask", "loss"])
    for i, (m, loss) in enumerate(res.ranked):
        w.writerow([i, "".join(str(x) for x in m), repr(loss)])
    _emit(buf.getvalue(), args.out)
    if cfg.run_dir and (Path(cfg.run_dir) / "model.ckpt").exists():
        # place the run's frozen mask in the ranking
        meta, _ = checkpoint.load(Path(cfg.run_dir) / "model.ckpt")
        mask = meta.get("extra", {}).get("mask")
        if mask is not None:
            rank = res.rank_of(mask)
            (Path(cfg.run_dir) / "oracle_rank.json").write_text(
                json.dumps({"mask": mask, "rank": rank, "best_mask": [int(m) for m in res.best_mask]}, sort_keys=True)
                + "\n"
            )
            log.info("frozen mask %s has oracle rank %d", mask, rank)


def cmd_eval(cfg: PipelineConfig, args) -> None:
    from .harness import Corpus, eval_perplexity
    from .model import load_checkpoint

    path = args.model or cfg.teacher
    if not path:
        raise CLIError("eval", "--model is required")
    params = load_checkpoint(path)
    corpus = Corpus.load(_need(cfg, "corpus", "eval"))
    stream = corpus.train if args.split == "train" else corpus.heldout
    ppl = eval_perplexity(params, stream, cfg.seq_len, max_tokens=cfg.eval_tokens)
    _emit(json.dumps({"model": str(path), "split": args.split, "ppl": ppl}, sort_keys=True) + "\n", args.out)


def cmd_trace(cfg: PipelineConfig, args) -> None:
    run_dir = Path(_need(cfg, "run_dir", "trace"))
    path = run_dir / "trajectory.csv"
    if not path.exists():
        raise CLIError("trace", f"{run_dir} holds no trajectory.csv")
    _emit(path.read_text(), args.out)


COMMANDS = {
    "gen-corpus": (cmd_gen_corpus, "generate a synthetic corpus directory"),
    "train-teacher": (cmd_train_teacher, "train the dense teacher model"),
    "importance": (cmd_importance, "write per-layer KL importance and BI redundancy CSV"),
    "dump-logits": (cmd_dump_logits, "cache the teacher's top-K distribution for the training stream"),
    "prune": (cmd_prune, "mask search followed by fine-tuning of the pruned model"),
    "oracle": (cmd_oracle, "rank every admissible mask by LM loss"),
    "eval": (cmd_eval, "held-out perplexity of a checkpoint"),
    "trace": (cmd_trace, "re-emit the search trajectory CSV of a run directory"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output path")
        cfg_group = p.add_argument_group("config keys")
        for key in FIELD_NAMES:
            cfg_group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=None, metavar="V")
        if name == "prune":
            p.add_argument("--resume", action="store_true", help="continue from run_dir/state.ckpt")
            p.add_argument("--stop-at", type=int, default=None, help="checkpoint and stop after step t")
        if name == "eval":
            p.add_argument("--model", help="checkpoint to evaluate (defaults to --teacher)")
            p.add_argument("--split", choices=("heldout", "train"), default="heldout")
    return parser


def resolve_config(args) -> PipelineConfig:
    flags = {
        key: yaml.safe_load(val)
        for key in FIELD_NAMES
        if (val := getattr(args, f"cfg_{key}")) is not None
    }
    # path-like values stay strings even when YAML would read them as numbers
    for key in ("corpus", "teacher", "cache", "run_dir", "corpus_kind"):
        if key in flags:
            flags[key] = getattr(args, f"cfg_{key}")
    overrides = {**flags, **config_mod.parse_overrides(args.set)}
    return config_mod.load(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    stage = args.command
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command][0](cfg, args)
    except config_mod.ConfigError as exc:
        print(f"error [config] {exc}", file=sys.stderr)
        return 2
    except CLIError as exc:
        print(f"error [{exc.stage}] {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        tag = getattr(exc, "stage", stage)
        msg = str(exc)
        if msg.startswith(f"[{tag}] "):
            msg = msg[len(tag) + 3 :]
        print(f"error [{tag}] {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
