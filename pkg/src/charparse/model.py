"""The full pipeline: word/piece embedder, transformer, MLM head, layer mix, parser."""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np

from .autodiff import Module, Parameter, Tensor, no_grad, ops
from .char_encoder import CharEncoder, CharEncoderConfig, CharVocab
from .encoder import (
    AggregationSpec,
    EncoderConfig,
    EncoderOutput,
    MlmHead,
    ScalarMix,
    TransformerEncoder,
    aggregate,
)
from .parser import Parser, ParserConfig, ParseTree, Vocabularies
from .subword import SubwordEmbedder, SubwordVocab, average_pieces

ENCODER_PREFIXES = ("embedder.", "encoder.")


class Pipeline(Module):
    """Language model plus (once fine-tuned) the tagger/parser.

    ``embedder`` is a :class:`CharEncoder` or a :class:`SubwordEmbedder`
    depending on ``enc_cfg.source``.
    """

    def __init__(
        self,
        enc_cfg: EncoderConfig,
        rng: np.random.Generator,
        char_cfg: Optional[CharEncoderConfig] = None,
        char_vocab: Optional[CharVocab] = None,
        subword_vocab: Optional[SubwordVocab] = None,
        mlm_vocab: Optional[Sequence[str]] = None,
        mask_rate: float = 0.15,
    ):
        self.enc_cfg = enc_cfg
        if enc_cfg.source == "character":
            if char_vocab is None:
                raise ValueError("character pipeline needs a CharVocab")
            char_cfg = char_cfg or CharEncoderConfig(d_model=enc_cfg.d_model)
            if char_cfg.d_model != enc_cfg.d_model:
                raise ValueError("char encoder projection must match d_model")
            self.char_cfg = char_cfg
            self.embedder = CharEncoder(char_cfg, char_vocab, rng)
        else:
            if subword_vocab is None:
                raise ValueError("subword pipeline needs a SubwordVocab")
            self.char_cfg = None
            self.embedder = SubwordEmbedder(subword_vocab, enc_cfg.d_model, rng)
        self.encoder = TransformerEncoder(enc_cfg, rng)
        self.mlm_head = None
        if mlm_vocab is not None:
            self.mlm_head = MlmHead(mlm_vocab, enc_cfg.d_model, rng, mask_rate=mask_rate)
        self.mix: Optional[ScalarMix] = None
        self.parser: Optional[Parser] = None
        self.aggregation = AggregationSpec()
        self.parser_cfg: Optional[ParserConfig] = None
        self.assign_names()

    # ------------------------------------------------------------ structure

    @property
    def source(self) -> str:
        return self.enc_cfg.source

    def attach_parser(self, cfg: ParserConfig, vocabs: Vocabularies, spec: AggregationSpec,
                      rng: np.random.Generator) -> None:
        layers = spec.resolve(self.enc_cfg.n_layers)
        self.aggregation = spec
        self.parser_cfg = cfg
        self.mix = ScalarMix(len(layers)) if spec.mode == "scalar_mix" else None
        self.parser = Parser(cfg, vocabs, self.enc_cfg.d_model, rng)
        self.assign_names()

    def encoder_parameters(self) -> list[Parameter]:
        return [p for n, p in self.named_parameters() if n.startswith(ENCODER_PREFIXES)]

    def task_parameters(self) -> list[Parameter]:
        return [p for n, p in self.named_parameters() if n.startswith(("parser.", "mix."))]

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named_parameters():
            p.data = state[n].copy()

    # ------------------------------------------------------------ tokens

    def tokens_for(self, words: Sequence[str]) -> tuple[list[str], list[int]]:
        """Input units for ``words`` and the number of units per word."""
        if self.source == "character":
            return list(words), [1] * len(words)
        return self.embedder.split(words)

    def encode(self, token_lists: Sequence[Sequence[str]], rng=None) -> EncoderOutput:
        """Encode a batch; [CLS]/[SEP] are added and shorter rows padded with [PAD]."""
        seqs = [["[CLS]", *toks, "[SEP]"] for toks in token_lists]
        width = max(len(s) for s in seqs)
        flat, mask = [], np.zeros((len(seqs), width), dtype=bool)
        for b, s in enumerate(seqs):
            flat.extend(s + ["[PAD]"] * (width - len(s)))
            mask[b, : len(s)] = True
        emb = self.embedder.embed_words(flat)
        emb = ops.reshape(emb, (len(seqs), width, self.enc_cfg.d_model))
        return self.encoder(emb, mask, rng)

    def _chunks(self, words: Sequence[str]) -> list[tuple[list[str], list[int], int, int]]:
        """Split a sentence into word-aligned windows that fit max_seq_len."""
        limit = self.enc_cfg.max_seq_len - 2
        chunks = []
        toks: list[str] = []
        groups: list[int] = []
        start = 0
        for i, w in enumerate(words):
            wt, wg = self.tokens_for([w])
            if len(wt) > limit:
                raise ValueError(f"word {w!r} alone needs {len(wt)} positions (limit {limit})")
            if len(toks) + len(wt) > limit:
                chunks.append((toks, groups, start, i))
                toks, groups, start = [], [], i
            toks.extend(wt)
            groups.extend(wg)
        chunks.append((toks, groups, start, len(words)))
        return chunks

    def word_vectors(self, sentences: Sequence[Sequence[str]], rng=None) -> list[Tensor]:
        """Aggregated contextual vector per word, one [n_words, d_model] tensor per sentence."""
        spec = self.aggregation
        pieces = []  # (sentence index, chunk tokens, groups)
        for k, words in enumerate(sentences):
            for toks, groups, _, _ in self._chunks(words):
                pieces.append((k, toks, groups))
        if spec.trainable:
            out = self.encode([p[1] for p in pieces], rng)
        else:
            # frozen encoder acts as a deterministic feature extractor
            modes = [(m, m.training) for m in (self.embedder, self.encoder)]
            self.embedder.eval()
            self.encoder.eval()
            with no_grad():
                out = self.encode([p[1] for p in pieces], None)
            for m, mode in modes:
                m.train(mode)
        agg = aggregate(out, spec, self.mix)
        per_sentence: list[list[Tensor]] = [[] for _ in sentences]
        for b, (k, toks, groups) in enumerate(pieces):
            rows = ops.getitem(agg, (b, slice(1, 1 + len(toks))))
            if self.source == "subword":
                rows = average_pieces(rows, groups)
            per_sentence[k].append(rows)
        return [parts[0] if len(parts) == 1 else ops.concat(parts, axis=0) for parts in per_sentence]

    # ------------------------------------------------------------ inference

    def predict(self, sentences: Sequence[Sequence[str]], batch_size: int = 32) -> list[ParseTree]:
        if self.parser is None:
            raise RuntimeError("model has no parser; fine-tune it first")
        was_training = self.training
        self.eval()
        trees = []
        with no_grad():
            for i in range(0, len(sentences), batch_size):
                batch = sentences[i : i + batch_size]
                for words, lm in zip(batch, self.word_vectors(batch)):
                    arc, labels, tlog, _ = self.parser.forward(words, lm)
                    trees.append(self.parser.decode(arc, labels, tlog))
        self.train(was_training)
        return trees

    # ------------------------------------------------------------ config

    def config(self) -> dict:
        cfg = {f"encoder.{k}": v for k, v in dataclasses.asdict(self.enc_cfg).items()}
        if self.char_cfg is not None:
            cfg.update({f"char.{k}": v for k, v in dataclasses.asdict(self.char_cfg).items()})
        cfg["model.has_mlm_head"] = self.mlm_head is not None
        if self.mlm_head is not None:
            cfg["mlm.mask_rate"] = self.mlm_head.mask_rate
            cfg["mlm.split"] = list(self.mlm_head.split)
        cfg["model.has_parser"] = self.parser is not None
        if self.parser is not None:
            cfg.update({f"parser.{k}": v for k, v in dataclasses.asdict(self.parser_cfg).items()})
            cfg["aggregation.layers"] = list(self.aggregation.layers)
            cfg["aggregation.mode"] = self.aggregation.mode
            cfg["aggregation.trainable"] = self.aggregation.trainable
        return cfg
