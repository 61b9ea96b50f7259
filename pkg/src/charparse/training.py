"""MLM pretraining/adaptation, task fine-tuning, early stopping and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import config as flatconfig
from .autodiff import AdamState, Parameter, Tape, adam_step, backward, no_grad
from .char_encoder import CharEncoderConfig, CharVocab
from .corpus import RawCorpus, Sentence, top_k_words
from .encoder import AggregationSpec, EncoderConfig, mlm_loss, mlm_mask, parse_layers
from .evaluation import score
from .model import Pipeline
from .parser import ParserConfig, Vocabularies
from .subword import SubwordVocab, train_subword_vocab

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    epochs: int = 20
    max_steps: int = 0  # 0: no step limit
    lr: float = 1e-3
    encoder_lr: float = 5e-5
    mlm_lr: float = 1.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    mlm_beta2: float = 0.98  # a shorter second-moment memory keeps MLM stable at the higher lr
    eps: float = 1e-8
    warmup: float = 0.05  # fraction of total steps
    schedule: str = "linear"  # after warmup: "linear" decay to 0 or "constant"
    patience: int = 5
    early_stopping: bool = True
    val_fraction: float = 0.10
    max_grad_norm: float = 0.0  # 0: no clipping
    lambda_tag: float = 1.0
    layers: str = "all"
    agg: str = "last"
    frozen: bool = False

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.schedule not in ("linear", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}; choose linear or constant")
        if self.agg not in AGG_NAMES:
            raise ValueError(f"unknown aggregation {self.agg!r}; choose from {sorted(AGG_NAMES)}")

    def aggregation(self, n_layers: int) -> AggregationSpec:
        mode = AGG_NAMES[self.agg]
        layers = parse_layers(self.layers, n_layers)
        if mode == "last_layer":
            if self.layers != "all" and layers != (n_layers - 1,):
                raise ValueError(f"last-layer aggregation uses layer {n_layers - 1}, not {self.layers!r}")
            layers = ()
        return AggregationSpec(layers, mode, trainable=not self.frozen)

    def adam(self, lr: float, total_steps: int, beta2: Optional[float] = None) -> AdamState:
        warm = int(math.ceil(self.warmup * total_steps)) if self.warmup > 0 else 0
        beta2 = self.beta2 if beta2 is None else beta2
        return AdamState(lr=lr, beta1=self.beta1, beta2=beta2, eps=self.eps, warmup_steps=warm,
                         total_steps=total_steps if self.schedule == "linear" else None,
                         max_grad_norm=self.max_grad_norm or None)


AGG_NAMES = {"last": "last_layer", "last_layer": "last_layer", "mean": "mean",
             "scalar-mix": "scalar_mix", "scalar_mix": "scalar_mix"}


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: Optional[float]
    dev_metric: Optional[float]


def format_metrics(metrics: Sequence[EpochMetrics]) -> str:
    lines = ["epoch\ttrain_loss\tdev_metric"]
    for m in metrics:
        tl = "-" if m.train_loss is None else f"{m.train_loss:.6f}"
        dm = "-" if m.dev_metric is None else f"{m.dev_metric:.6f}"
        lines.append(f"{m.epoch}\t{tl}\t{dm}")
    return "\n".join(lines) + "\n"


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what}: {value}")


# ---------------------------------------------------------------- model construction


def build_model(corpus: RawCorpus, source: str = "character", seed: int = 0,
                enc_cfg: Optional[EncoderConfig] = None, char_cfg: Optional[CharEncoderConfig] = None,
                mlm_vocab_size: int = 5000, subword_size: int = 2000, mask_rate: float = 0.15) -> Pipeline:
    """Fresh randomly initialised pipeline whose vocabularies come from ``corpus``."""
    enc_cfg = dataclasses.replace(enc_cfg or EncoderConfig(), source=source)
    rng = np.random.default_rng([seed, 0])
    if source == "character":
        char_vocab = CharVocab.build(corpus.words())
        mlm_vocab = [w for w, _ in top_k_words(corpus, mlm_vocab_size)]
        return Pipeline(enc_cfg, rng, char_cfg=char_cfg or CharEncoderConfig(d_model=enc_cfg.d_model),
                        char_vocab=char_vocab, mlm_vocab=mlm_vocab, mask_rate=mask_rate)
    vocab = train_subword_vocab(corpus, max(subword_size, _min_subword_size(corpus)))
    mlm_vocab = [p for p in vocab.itos if p not in ("[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]")]
    return Pipeline(enc_cfg, rng, subword_vocab=vocab, mlm_vocab=mlm_vocab, mask_rate=mask_rate)


def _min_subword_size(corpus: RawCorpus) -> int:
    from .subword import SPECIALS, base_alphabet

    return len(base_alphabet(corpus.words())) + len(SPECIALS)


# ---------------------------------------------------------------- MLM


def split_corpus(corpus: RawCorpus, val_fraction: float, seed: int) -> tuple[list, list]:
    n = corpus.sentence_count
    if n < 2:
        raise ValueError("MLM training needs at least two sentences")
    order = np.random.default_rng([seed, 10]).permutation(n)
    n_val = min(max(1, int(round(val_fraction * n))), n - 1)
    val = [corpus.sentences[i] for i in sorted(order[:n_val])]
    train = [corpus.sentences[i] for i in sorted(order[n_val:])]
    return train, val


def _mlm_batch_loss(model: Pipeline, batch: Sequence[Sequence[str]], rng: np.random.Generator,
                    masks=None, dropout_rng=None):
    head = model.mlm_head
    token_lists, target_rows = [], []
    for k, words in enumerate(batch):
        toks, _ = model.tokens_for(words)
        m = masks[k] if masks is not None else mlm_mask(toks, head, rng)
        token_lists.append(m.tokens)
        target_rows.append(m.targets)
    width = max(len(t) for t in token_lists) + 2
    targets = np.full((len(batch), width), -1, dtype=np.int64)
    for k, t in enumerate(target_rows):
        targets[k, 1 : 1 + len(t)] = t
    out = model.encode(token_lists, dropout_rng)
    return mlm_loss(out, targets, head)


def _fits(model: Pipeline, words: Sequence[str]) -> bool:
    return len(model.tokens_for(words)[0]) + 2 <= model.enc_cfg.max_seq_len


def evaluate_mlm(model: Pipeline, val: Sequence[Sequence[str]], masks, batch_size: int) -> float:
    """Token-weighted mean held-out MLM loss (negative log-likelihood)."""
    model.eval()
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(val), batch_size):
            res = _mlm_batch_loss(model, val[i : i + batch_size], None, masks[i : i + batch_size])
            total += float(res.loss.data) * res.count
            count += res.count
    model.train()
    return total / count if count else 0.0


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    best_epoch: int
    losses: list[float] = field(default_factory=list)
    mix_weight_sums: list[float] = field(default_factory=list)  # per step, scalar-mix runs only


def pretrain_mlm(model: Pipeline, corpus: RawCorpus, cfg: TrainConfig,
                 on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> TrainResult:
    """Masked-LM training with a held-out split; keeps the best held-out epoch.

    Epoch 0 is the untrained model. Works for pretraining from scratch and
    for adapting an already trained model alike.
    """
    if model.mlm_head is None:
        raise ValueError("model has no MLM head")
    if corpus.sentence_count == 0:
        raise ValueError("empty corpus")
    train, val = split_corpus(corpus, cfg.val_fraction, cfg.seed)
    train = [s for s in train if _fits(model, s)]
    val = [s for s in val if _fits(model, s)]
    skipped = corpus.sentence_count - len(train) - len(val)
    if skipped:
        logger.warning("skipped %d sentences longer than max_seq_len", skipped)
    if not train or not val:
        raise ValueError("MLM split left no trainable or no held-out sentences")
    val_rng = np.random.default_rng([cfg.seed, 11])
    val_masks = [mlm_mask(model.tokens_for(s)[0], model.mlm_head, val_rng) for s in val]
    order_rng = np.random.default_rng([cfg.seed, 12])
    mask_rng = np.random.default_rng([cfg.seed, 13])
    drop_rng = np.random.default_rng([cfg.seed, 14])

    params = [p for n, p in model.named_parameters() if not n.startswith(("parser.", "mix."))]
    n_batches = math.ceil(len(train) / cfg.batch_size)
    total_steps = n_batches * cfg.epochs
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)
    state = cfg.adam(cfg.mlm_lr, total_steps, cfg.mlm_beta2).init(params)

    model.train()
    best = evaluate_mlm(model, val, val_masks, cfg.batch_size)
    _check_finite(best, "held-out MLM loss")
    metrics = [EpochMetrics(0, None, best)]
    if on_epoch:
        on_epoch(metrics[-1])
    best_state, best_epoch = model.state(), 0
    losses: list[float] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train))
        tot, cnt = 0.0, 0
        for b in range(n_batches):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            batch = [train[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            with Tape() as tape:
                res = _mlm_batch_loss(model, batch, mask_rng, dropout_rng=drop_rng)
            if res.count == 0:
                continue
            value = float(res.loss.data)
            _check_finite(value, "MLM loss")
            backward(tape, res.loss)
            adam_step(params, state)
            step += 1
            losses.append(value)
            tot += value * res.count
            cnt += res.count
        dev = evaluate_mlm(model, val, val_masks, cfg.batch_size)
        _check_finite(dev, "held-out MLM loss")
        metrics.append(EpochMetrics(epoch, tot / cnt if cnt else None, dev))
        if on_epoch:
            on_epoch(metrics[-1])
        if dev < best:
            best, best_state, best_epoch = dev, model.state(), epoch
        if cfg.max_steps and step >= cfg.max_steps:
            break
    model.load_state(best_state)
    model.zero_grad()
    return TrainResult(metrics, best_epoch, losses)


# ---------------------------------------------------------------- task


def evaluate_task(model: Pipeline, sentences: Sequence[Sentence], batch_size: int = 32):
    return score(sentences, model.predict([s.words for s in sentences], batch_size))


def finetune_task(model: Pipeline, train: Sequence[Sentence], dev: Optional[Sequence[Sentence]],
                  cfg: TrainConfig, parser_cfg: Optional[ParserConfig] = None,
                  on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> TrainResult:
    """Train tagger + parser (and the encoder unless frozen) on a treebank.

    A fresh parser is attached. With ``dev`` and early stopping, the epoch
    with the best dev LAS is kept.
    """
    if not train:
        raise ValueError("empty training treebank")
    if cfg.early_stopping and dev is not None and not dev:
        raise ValueError("early stopping needs a non-empty dev split")
    parser_cfg = dataclasses.replace(parser_cfg or ParserConfig(), lambda_tag=cfg.lambda_tag)
    vocabs = Vocabularies.build(train, parser_cfg)
    spec = cfg.aggregation(model.enc_cfg.n_layers)
    model.attach_parser(parser_cfg, vocabs, spec, np.random.default_rng([cfg.seed, 1]))
    order_rng = np.random.default_rng([cfg.seed, 2])
    drop_rng = np.random.default_rng([cfg.seed, 3])

    task = model.task_parameters()
    params = list(task)
    if not cfg.frozen:
        params = model.encoder_parameters() + task
    n_batches = math.ceil(len(train) / cfg.batch_size)
    total_steps = n_batches * cfg.epochs
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)
    state = cfg.adam(cfg.lr, total_steps).init(params)
    if not cfg.frozen:
        state.lr_overrides = {p.name: cfg.encoder_lr for p in model.encoder_parameters()}

    model.train()
    metrics: list[EpochMetrics] = []
    losses: list[float] = []
    mix_sums: list[float] = []
    best_las, best_state, best_epoch = -1.0, None, 0
    since_best = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train))
        tot, cnt = 0.0, 0
        for b in range(n_batches):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            batch = [train[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            with Tape() as tape:
                vectors = model.word_vectors([s.words for s in batch], drop_rng)
                loss = None
                for sent, lm in zip(batch, vectors):
                    _, _, _, l = model.parser.forward(sent.words, lm, gold=sent, rng=drop_rng)
                    loss = l if loss is None else loss + l
                loss = loss * (1.0 / len(batch))
            value = float(loss.data)
            _check_finite(value, "task loss")
            backward(tape, loss)
            adam_step(params, state)
            if model.mix is not None:
                mix_sums.append(float(model.mix.weights().sum()))
                if abs(mix_sums[-1] - 1.0) > 1e-6:
                    raise TrainingError(f"scalar-mix weights sum to {mix_sums[-1]!r}")
            step += 1
            losses.append(value)
            tot += value * len(batch)
            cnt += len(batch)
        dev_las = None
        if dev:
            dev_las = evaluate_task(model, dev).las
        metrics.append(EpochMetrics(epoch, tot / cnt if cnt else None, dev_las))
        if on_epoch:
            on_epoch(metrics[-1])
        if dev and cfg.early_stopping:
            if dev_las > best_las:
                best_las, best_state, best_epoch, since_best = dev_las, model.state(), epoch, 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
        if cfg.max_steps and step >= cfg.max_steps:
            break
    if best_state is not None:
        model.load_state(best_state)
    else:
        best_epoch = metrics[-1].epoch if metrics else 0
    model.zero_grad()
    return TrainResult(metrics, best_epoch, losses, mix_sums)


# ---------------------------------------------------------------- checkpoints


def encoder_blob(model: Pipeline) -> bytes:
    """Little-endian f32 bytes of all embedder/encoder parameters."""
    return b"".join(p.data.astype("<f4").tobytes() for p in model.encoder_parameters())


def save_checkpoint(model: Pipeline, path: Union[str, Path], extra_config: Optional[dict] = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "blob_bytes": offset, "parameters": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    (path / "params.bin").write_bytes(b"".join(chunks))
    cfg = model.config()
    cfg["format_version"] = FORMAT_VERSION
    if extra_config:
        cfg.update(extra_config)
    flatconfig.dump(cfg, path / "config.toml")
    if model.source == "character":
        (path / "char_vocab.txt").write_text(model.embedder.vocab.dumps(), encoding="utf-8")
    else:
        (path / "subword_vocab.txt").write_text(model.embedder.vocab.dumps(), encoding="utf-8")
    if model.mlm_head is not None:
        (path / "mlm_vocab.txt").write_text("\n".join(model.mlm_head.vocab) + "\n", encoding="utf-8")
    if model.parser is not None:
        (path / "parser_vocab.txt").write_text(model.parser.vocabs.dumps(), encoding="utf-8")


def _read(path: Path, name: str) -> str:
    f = path / name
    if not f.exists():
        raise CheckpointError(f"checkpoint is missing {name}")
    return f.read_text(encoding="utf-8")


def load_checkpoint(path: Union[str, Path], expect_source: Optional[str] = None) -> Pipeline:
    path = Path(path)
    cfg = flatconfig.loads(_read(path, "config.toml"))
    manifest = json.loads(_read(path, "manifest.json"))
    if manifest.get("format_version") != FORMAT_VERSION or cfg.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    enc_cfg = EncoderConfig(**flatconfig.section(cfg, "encoder"))
    if expect_source is not None and enc_cfg.source != expect_source:
        raise CheckpointError(f"checkpoint holds a {enc_cfg.source} model, expected {expect_source}")
    rng = np.random.default_rng(0)
    mlm_vocab = None
    mlm = flatconfig.section(cfg, "mlm")
    if cfg.get("model.has_mlm_head"):
        mlm_vocab = _read(path, "mlm_vocab.txt").rstrip("\n").split("\n")
    if enc_cfg.source == "character":
        model = Pipeline(enc_cfg, rng, char_cfg=CharEncoderConfig(**flatconfig.section(cfg, "char")),
                         char_vocab=CharVocab.loads(_read(path, "char_vocab.txt")), mlm_vocab=mlm_vocab,
                         mask_rate=mlm.get("mask_rate", 0.15))
    else:
        model = Pipeline(enc_cfg, rng, subword_vocab=SubwordVocab.loads(_read(path, "subword_vocab.txt")),
                         mlm_vocab=mlm_vocab, mask_rate=mlm.get("mask_rate", 0.15))
    if model.mlm_head is not None and "split" in mlm:
        model.mlm_head.split = tuple(mlm["split"])
    if cfg.get("model.has_parser"):
        pcfg = ParserConfig(**flatconfig.section(cfg, "parser"))
        vocabs = Vocabularies.loads(_read(path, "parser_vocab.txt"))
        spec = AggregationSpec(tuple(cfg["aggregation.layers"]), cfg["aggregation.mode"],
                               cfg["aggregation.trainable"])
        model.attach_parser(pcfg, vocabs, spec, rng)

    blob = (path / "params.bin").read_bytes() if (path / "params.bin").exists() else None
    if blob is None:
        raise CheckpointError("checkpoint is missing params.bin")
    if len(blob) != manifest.get("blob_bytes"):
        raise CheckpointError(f"params.bin has {len(blob)} bytes, manifest expects {manifest.get('blob_bytes')}")
    params = dict(model.named_parameters())
    entries = manifest["parameters"]
    names = [e["name"] for e in entries]
    if sorted(names) != sorted(params) or len(set(names)) != len(names):
        raise CheckpointError("manifest does not match the model's parameters")
    for e in entries:
        p = params[e["name"]]
        if tuple(e["shape"]) != p.shape:
            raise CheckpointError(f"shape mismatch for {e['name']}: {e['shape']} vs {list(p.shape)}")
        nbytes = 4 * int(np.prod(p.shape, dtype=np.int64))
        start = e["offset"]
        if start + nbytes > len(blob):
            raise CheckpointError(f"params.bin truncated inside {e['name']}")
        p.data = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=start).reshape(p.shape).astype(np.float32)
        p.zero_grad()
    return model
