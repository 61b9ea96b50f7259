"""Command-line interface: ``charparse <command> ...``.

Every command resolves a flat configuration (defaults, then ``--config``,
then ``--set key=value`` overrides, then explicit flags), writes it to the
output directory as ``config.toml`` and only then starts working. Passing
that file back with ``--config`` reproduces the run.

Exit codes: 0 success, 1 runtime or training failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from . import config as flatconfig
from .char_encoder import CharEncoderConfig
from .corpus import (
    ConlluError,
    NoiseRuleSet,
    RawCorpus,
    Sentence,
    Token,
    noise_treebank,
    parse_conllu,
    read_conllu,
    read_raw_corpus,
    top_k_words,
    vocab_coverage,
    write_conllu,
)
from .encoder import EncoderConfig, parse_layers
from .evaluation import REPORT_HEADER, format_table, format_tsv, report_rows, robustness_report, score, significance
from .parser import ParserConfig, ParseTree
from .subword import segment, train_subword_vocab
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    build_model,
    evaluate_task,
    finetune_task,
    format_metrics,
    load_checkpoint,
    pretrain_mlm,
    save_checkpoint,
)

logger = logging.getLogger("charparse")


class UsageError(Exception):
    """Bad flags, paths or configuration values (exit code 2)."""


# ---------------------------------------------------------------- configuration

MODEL_DEFAULTS = {"source": "character", "mlm_vocab_size": 5000, "subword_size": 2000, "mask_rate": 0.15}
ABLATE_DEFAULTS = {"layer_agg": "mean", "layer_frozen": False}


def default_config() -> dict[str, Any]:
    cfg: dict[str, Any] = {}
    cfg.update(flatconfig.flatten("train", dataclasses.asdict(TrainConfig())))
    enc = dataclasses.asdict(EncoderConfig())
    enc.pop("source")
    cfg.update(flatconfig.flatten("encoder", enc))
    char = dataclasses.asdict(CharEncoderConfig())
    char.pop("d_model")
    cfg.update(flatconfig.flatten("char", char))
    cfg.update(flatconfig.flatten("parser", dataclasses.asdict(ParserConfig())))
    cfg.update(flatconfig.flatten("model", MODEL_DEFAULTS))
    cfg.update(flatconfig.flatten("ablate", ABLATE_DEFAULTS))
    return cfg


def _parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, _, value = text.partition("=")
    parsed = flatconfig.loads(f"{key.strip()} = {value.strip()}")
    return next(iter(parsed.items()))


def resolve_config(args: argparse.Namespace, flags: dict[str, Any]) -> dict[str, Any]:
    """Defaults < config file < --set overrides < explicit flags."""
    cfg = default_config()
    known = set(cfg)
    layers: list[dict[str, Any]] = []
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        layers.append(flatconfig.load(path))
    layers.append(dict(_parse_override(s) for s in getattr(args, "set", None) or []))
    layers.append({k: v for k, v in flags.items() if v is not None})
    for layer in layers:
        for key, value in layer.items():
            if key not in known and not key.startswith(("data.", "run.")):
                raise UsageError(f"unknown configuration key {key!r}")
            cfg[key] = value
    return cfg


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(**flatconfig.section(cfg, "train"))


def encoder_config(cfg: dict[str, Any]) -> EncoderConfig:
    return EncoderConfig(source=cfg["model.source"], **flatconfig.section(cfg, "encoder"))


def char_config(cfg: dict[str, Any]) -> CharEncoderConfig:
    return CharEncoderConfig(d_model=cfg["encoder.d_model"], **flatconfig.section(cfg, "char"))


def parser_config(cfg: dict[str, Any]) -> ParserConfig:
    return ParserConfig(**flatconfig.section(cfg, "parser"))


def check_layers(cfg: dict[str, Any], n_layers: int) -> None:
    try:
        train_config(cfg).aggregation(n_layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def prepare_out(cfg: dict[str, Any], out: Optional[str]) -> Path:
    if not out:
        raise UsageError("--out is required")
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise UsageError(f"output path exists and is not a directory: {path}")
    path.mkdir(parents=True, exist_ok=True)
    flatconfig.dump(cfg, path / "config.toml")
    return path


# ---------------------------------------------------------------- inputs


def _existing(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what} path")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


# process-wide reading options, set once from the top-level flags in main()
READ_OPTIONS = {"allow_multi_root": False}


def load_treebank(path: Optional[str], what: str) -> list[Sentence]:
    p = _existing(path, what)
    try:
        return read_conllu(p, allow_multi_root=READ_OPTIONS["allow_multi_root"])
    except ConlluError as exc:
        raise UsageError(f"{p}: {exc}") from None


def load_corpus(path: Optional[str]) -> RawCorpus:
    corpus = read_raw_corpus(_existing(path, "corpus"))
    if corpus.sentence_count == 0:
        raise UsageError(f"corpus is empty: {path}")
    return corpus


def load_model(path: Optional[str]):
    if not path:
        raise UsageError("missing checkpoint path")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"checkpoint directory not found: {p}")
    return load_checkpoint(p)


def read_sentences(path: Path) -> list[Sentence]:
    """CoNLL-U when the file looks like it, otherwise one whitespace-tokenised sentence per line."""
    text = path.read_text(encoding="utf-8")
    first = next((line for line in text.splitlines() if line.strip() and not line.startswith("#")), "")
    if first.count("\t") == 9:
        return parse_conllu(text, allow_multi_root=READ_OPTIONS["allow_multi_root"])
    sents = []
    for words in RawCorpus.from_text(text).sentences:
        sents.append(Sentence(tuple(Token(i + 1, w, "_", 0, "_") for i, w in enumerate(words))))
    return sents


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args, {
        "train.seed": args.seed, "train.epochs": args.epochs, "model.source": args.source,
        "data.corpus": args.corpus, "data.checkpoint": args.checkpoint,
    })
    corpus = load_corpus(cfg.get("data.corpus"))
    tcfg = train_config(cfg)
    out = prepare_out(cfg, args.out)
    if cfg.get("data.checkpoint"):
        model = load_model(cfg["data.checkpoint"])
        if model.mlm_head is None:
            raise UsageError("checkpoint has no MLM head to adapt")
    else:
        model = build_model(corpus, cfg["model.source"], tcfg.seed, encoder_config(cfg), char_config(cfg),
                            cfg["model.mlm_vocab_size"], cfg["model.subword_size"], cfg["model.mask_rate"])
    result = pretrain_mlm(model, corpus, tcfg, on_epoch=lambda m: logger.info("epoch %d held-out %.4f", m.epoch, m.dev_metric))
    (out / "metrics.tsv").write_text(format_metrics(result.metrics), encoding="utf-8")
    save_checkpoint(model, out / "checkpoint", {"train.best_epoch": result.best_epoch})
    print(f"best epoch {result.best_epoch}: held-out MLM loss {result.metrics[result.best_epoch].dev_metric:.4f}")
    return 0


def _task_model(cfg: dict[str, Any], train: Sequence[Sentence], seed: int):
    """Checkpointed encoder (Model+MLM+Task) or a fresh one (Model+Task)."""
    if cfg.get("data.checkpoint"):
        return load_model(cfg["data.checkpoint"])
    corpus = RawCorpus([s.words for s in train])
    if cfg.get("data.corpus"):
        corpus = RawCorpus(corpus.sentences + load_corpus(cfg["data.corpus"]).sentences)
    return build_model(corpus, cfg["model.source"], seed, encoder_config(cfg), char_config(cfg),
                       cfg["model.mlm_vocab_size"], cfg["model.subword_size"], cfg["model.mask_rate"])


def cmd_finetune(args) -> int:
    cfg = resolve_config(args, {
        "train.seed": args.seed, "train.epochs": args.epochs, "train.layers": args.layers,
        "train.agg": args.agg, "train.frozen": True if args.frozen else None, "model.source": args.source,
        "data.train": args.train, "data.dev": args.dev, "data.checkpoint": args.checkpoint,
        "data.corpus": args.corpus,
    })
    train = load_treebank(cfg.get("data.train"), "training treebank")
    dev = load_treebank(cfg["data.dev"], "dev treebank") if cfg.get("data.dev") else None
    tcfg = train_config(cfg)
    model = _task_model(cfg, train, tcfg.seed)
    check_layers(cfg, model.enc_cfg.n_layers)
    out = prepare_out(cfg, args.out)
    result = finetune_task(model, train, dev, tcfg, parser_config(cfg))
    (out / "metrics.tsv").write_text(format_metrics(result.metrics), encoding="utf-8")
    save_checkpoint(model, out / "checkpoint", {"train.best_epoch": result.best_epoch})
    if dev:
        report = evaluate_task(model, dev)
        (out / "dev_report.tsv").write_text(format_tsv(report_rows([(tcfg.aggregation(model.enc_cfg.n_layers).label, report)]), REPORT_HEADER), encoding="utf-8")
        print(f"dev UPOS/UAS/LAS {report.triplet()}")
    return 0


def layer_grid(n_layers: int) -> list[str]:
    """Single bottom layer, lower half, middle third, upper half, top layer, all.

    For L=12 this gives 0, 0-5, 4-7, 6-11, 11, all; for L=4 it gives
    0, 0-1, 1-2, 2-3, 3, all.
    """
    L = n_layers
    half = max(L // 2, 1)
    mid_lo = L // 3
    mid_hi = max(mid_lo, -(-2 * L // 3) - 1)

    def rng(a: int, b: int) -> str:
        return str(a) if a == b else f"{a}-{b}"

    return ["0", rng(0, half - 1), rng(mid_lo, mid_hi), rng(min(half, L - 1), L - 1), str(L - 1), "all"]


STRATEGY_GRID = [("last", False), ("last", True), ("mean", False), ("mean", True),
                 ("scalar-mix", False), ("scalar-mix", True)]


def ablation_cells(cfg: dict[str, Any], n_layers: int) -> list[tuple[str, str, dict[str, Any]]]:
    """(grid, row label, train overrides) for every cell, strategy grid first."""
    cells = []
    for agg, frozen in STRATEGY_GRID:
        label = f"{agg}-{'fz' if frozen else 'ft'}"
        cells.append(("strategy", label, {"train.agg": agg, "train.frozen": frozen, "train.layers": "all"}))
    for layers in layer_grid(n_layers):
        cells.append(("layers", layers, {"train.agg": cfg["ablate.layer_agg"],
                                         "train.frozen": bool(cfg["ablate.layer_frozen"]),
                                         "train.layers": layers}))
    return cells


def cmd_ablate(args) -> int:
    cfg = resolve_config(args, {
        "train.seed": args.seed, "train.epochs": args.epochs, "model.source": args.source,
        "data.train": args.train, "data.dev": args.dev, "data.test": args.test,
        "data.checkpoint": args.checkpoint, "data.corpus": args.corpus,
    })
    train = load_treebank(cfg.get("data.train"), "training treebank")
    dev = load_treebank(cfg["data.dev"], "dev treebank") if cfg.get("data.dev") else None
    test = load_treebank(cfg["data.test"], "test treebank") if cfg.get("data.test") else dev
    if test is None:
        raise UsageError("ablate needs --dev or --test to score the cells")
    base_seed = int(cfg["train.seed"])
    if cfg.get("data.checkpoint"):
        n_layers = load_model(cfg["data.checkpoint"]).enc_cfg.n_layers
    else:
        n_layers = int(cfg["encoder.n_layers"])
    out = prepare_out(cfg, args.out)
    rows: dict[str, list] = {"strategy": [], "layers": []}
    for index, (grid, label, overrides) in enumerate(ablation_cells(cfg, n_layers)):
        cell_cfg = dict(cfg)
        cell_cfg.update(overrides)
        cell_cfg["train.seed"] = base_seed + index
        tcfg = train_config(cell_cfg)
        model = _task_model(cell_cfg, train, tcfg.seed)
        result = finetune_task(model, train, dev, tcfg, parser_config(cell_cfg))
        report = evaluate_task(model, test)
        cell_dir = out / f"{index:02d}_{grid}_{label}"
        cell_dir.mkdir(exist_ok=True)
        flatconfig.dump(cell_cfg, cell_dir / "config.toml")
        (cell_dir / "metrics.tsv").write_text(format_metrics(result.metrics), encoding="utf-8")
        rows[grid].append((label, report))
        logger.info("%s %s: %s", grid, label, report.triplet())
    for grid, title in (("strategy", "strategy"), ("layers", "layers")):
        body = report_rows(rows[grid])
        header = (title,) + REPORT_HEADER[1:]
        (out / f"{grid}.tsv").write_text(format_tsv(body, header), encoding="utf-8")
        print(format_table(body, header))
    return 0


def load_predictions(path: Optional[str], what: str) -> list[ParseTree]:
    return [ParseTree(s.heads, s.deprels, s.tags) for s in load_treebank(path, what)]


def cmd_eval(args) -> int:
    gold = load_treebank(args.gold, "gold treebank")
    if args.significance:
        a_path, b_path = args.significance
        a = score(gold, load_predictions(a_path, "prediction A"))
        b = score(gold, load_predictions(b_path, "prediction B"))
        p = significance(a, b, args.metric, args.trials, args.seed)
        print(f"A {a.triplet()}")
        print(f"B {b.triplet()}")
        print(f"p={p:.4f} ({args.metric}, {args.trials} trials)")
        return 0
    if not args.pred:
        raise UsageError("eval needs --pred or --significance A B")
    report = score(gold, load_predictions(args.pred, "predictions"))
    print(report.triplet())
    return 0


def cmd_parse(args) -> int:
    model = load_model(args.checkpoint)
    if model.parser is None:
        raise UsageError("checkpoint has no parser; run finetune first")
    sents = read_sentences(_existing(args.input, "input"))
    trees = model.predict([s.words for s in sents])
    text = write_conllu(sents, trees)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_stats(args) -> int:
    corpus = load_corpus(args.corpus)
    top = top_k_words(corpus, args.top_k)
    print(f"sentences\t{corpus.sentence_count}")
    print(f"tokens\t{corpus.token_count}")
    print(f"types\t{len(set(corpus.words()))}")
    if args.treebank:
        target = RawCorpus([s.words for s in load_treebank(args.treebank, "treebank")])
        cov = vocab_coverage([w for w, _ in top], target)
        print(f"top{args.top_k}_coverage\t{100.0 * cov.fraction:.2f}")
        if args.subword_size:
            vocab = train_subword_vocab(corpus, args.subword_size)
            sub = vocab_coverage(vocab.itos, target, lambda w: segment(w, vocab))
            unk = vocab.stoi["[UNK]"]
            n_unk = sum(1 for w in target.words() if unk in segment(w, vocab))
            print(f"subword_whole_word_coverage\t{100.0 * sub.fraction:.2f}")
            print(f"subword_pieces_per_word\t{sub.mean_segments:.3f}")
            print(f"subword_unk_rate\t{100.0 * n_unk / target.token_count:.2f}")
    for w, c in top[: args.show]:
        print(f"{w}\t{c}")
    return 0


def _rules(args) -> NoiseRuleSet:
    rules = NoiseRuleSet.load(_existing(args.rules, "rules file")) if args.rules else NoiseRuleSet()
    if args.seed is not None:
        rules = dataclasses.replace(rules, seed=args.seed)
    return rules


def cmd_noise(args) -> int:
    try:
        rules = _rules(args)
    except (flatconfig.ConfigError, TypeError, ValueError) as exc:
        raise UsageError(f"bad noise rules: {exc}") from None
    sents = load_treebank(args.input, "input treebank")
    text = write_conllu(noise_treebank(sents, rules))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_robustness(args) -> int:
    rules = _rules(args)
    treebank = load_treebank(args.treebank, "treebank")
    char_model = load_model(args.char) if args.char else None
    sub_model = load_model(args.subword) if args.subword else None
    if char_model is None and sub_model is None:
        raise UsageError("give --char and/or --subword checkpoints")
    report = robustness_report(char_model, sub_model, treebank, rules)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.tsv(), encoding="utf-8")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import toy_splits

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, dev, test, raw = toy_splits(args.seed, args.train_size, args.dev_size, args.test_size, args.raw_size)
    for name, sents in (("train", train), ("dev", dev), ("test", test)):
        (out / f"{name}.conllu").write_text(write_conllu(sents), encoding="utf-8")
    (out / "raw.txt").write_text("".join(" ".join(s) + "\n" for s in raw.sentences), encoding="utf-8")
    print(f"wrote {out}/train.conllu dev.conllu test.conllu raw.txt")
    return 0


# ---------------------------------------------------------------- argument parsing


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--source", choices=("character", "subword"))
    if out:
        p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="charparse", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--allow-multi-root", action="store_true",
                    help="accept treebank sentences with several roots (logged as warnings)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="masked-LM pretraining or adaptation on raw text")
    _common(p)
    p.add_argument("--corpus", help="raw text, one whitespace-tokenised sentence per line")
    p.add_argument("--checkpoint", help="adapt this model instead of starting from scratch")
    p.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("finetune", cmd_finetune, "train the tagger and parser"),
                                 ("ablate", cmd_ablate, "fine-tuning strategy and layer grids")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--train", help="training treebank (CoNLL-U)")
        p.add_argument("--dev", help="dev treebank for early stopping")
        p.add_argument("--checkpoint", help="pretrained encoder; omit to start from random weights")
        p.add_argument("--corpus", help="extra raw text for vocabularies when no checkpoint is given")
        if name == "finetune":
            p.add_argument("--layers", help="j, a-b or all")
            p.add_argument("--agg", choices=("last", "mean", "scalar-mix"))
            p.add_argument("--frozen", action="store_true")
        else:
            p.add_argument("--test", help="treebank the cells are scored on (defaults to --dev)")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="UPOS/UAS/LAS and significance")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred")
    p.add_argument("--significance", nargs=2, metavar=("PRED_A", "PRED_B"))
    p.add_argument("--metric", choices=("upos", "uas", "las"), default="las")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("parse", help="tag and parse a file with a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True, help="CoNLL-U or raw text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("stats", help="corpus statistics and vocabulary coverage")
    p.add_argument("--corpus", required=True)
    p.add_argument("--treebank")
    p.add_argument("--top-k", type=int, default=5000)
    p.add_argument("--subword-size", type=int, default=0)
    p.add_argument("--show", type=int, default=20)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("noise", help="inject spelling variation into a treebank")
    p.add_argument("--rules")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("robustness", help="clean vs noisy scores for character and subword models")
    p.add_argument("--char")
    p.add_argument("--subword")
    p.add_argument("--treebank", required=True)
    p.add_argument("--rules")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("synth", help="write a synthetic toy treebank and raw corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-size", type=int, default=16)
    p.add_argument("--dev-size", type=int, default=40)
    p.add_argument("--test-size", type=int, default=40)
    p.add_argument("--raw-size", type=int, default=2000)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    READ_OPTIONS["allow_multi_root"] = args.allow_multi_root
    try:
        return args.func(args)
    except (UsageError, flatconfig.ConfigError) as exc:
        print(f"charparse {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, CheckpointError, ConlluError, FloatingPointError) as exc:
        print(f"charparse {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    except (TypeError, ValueError) as exc:
        # configuration values rejected by a module's own validation
        print(f"charparse {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
