"""Treebank and raw-text ingestion, vocabulary statistics, orthographic noise."""

from __future__ import annotations

import dataclasses
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from . import config as flatconfig

logger = logging.getLogger(__name__)


class ConlluError(ValueError):
    """Malformed CoNLL-U input; ``line`` is 1-based (0 when not tied to a line)."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


@dataclass(frozen=True)
class Token:
    id: int
    form: str
    upos: str
    head: int
    deprel: str
    lemma: str = "_"
    xpos: str = "_"
    feats: str = "_"
    deps: str = "_"
    misc: str = "_"


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[Token, ...]
    comments: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> list[str]:
        return [t.form for t in self.tokens]

    @property
    def heads(self) -> list[int]:
        return [t.head for t in self.tokens]

    @property
    def deprels(self) -> list[str]:
        return [t.deprel for t in self.tokens]

    @property
    def tags(self) -> list[str]:
        return [t.upos for t in self.tokens]


def find_cycle(heads: Sequence[int]) -> Optional[list[int]]:
    """Return the dependents forming a cycle in a 1-based head list, or None."""
    n = len(heads)
    state = [0] * (n + 1)  # 0 unseen, 1 on current path, 2 done
    for start in range(1, n + 1):
        path = []
        node = start
        while node != 0 and state[node] == 0:
            state[node] = 1
            path.append(node)
            node = heads[node - 1]
        if node != 0 and state[node] == 1:
            return path[path.index(node) :]
        for v in path:
            state[v] = 2
    return None


def validate_tree(heads: Sequence[int], allow_multi_root: bool = False, line: int = 0) -> None:
    n = len(heads)
    for i, h in enumerate(heads, start=1):
        if not 0 <= h <= n:
            raise ConlluError(line, f"head {h} of token {i} out of range [0, {n}]")
        if h == i:
            raise ConlluError(line, f"token {i} is its own head")
    roots = sum(1 for h in heads if h == 0)
    if roots != 1:
        msg = "no root" if roots == 0 else f"{roots} roots"
        if roots == 0 or not allow_multi_root:
            raise ConlluError(line, msg)
        logger.warning("line %d: %s (accepted with allow_multi_root)", line, msg)
    cycle = find_cycle(heads)
    if cycle is not None:
        raise ConlluError(line, f"cyclic heads through tokens {cycle}")


def _finish(rows: list[tuple[int, list[str]]], comments: list[str], start: int, allow_multi_root: bool) -> Sentence:
    tokens = []
    seen: set[int] = set()
    for lineno, cols in rows:
        try:
            tid = int(cols[0])
        except ValueError:
            raise ConlluError(lineno, f"non-integer id {cols[0]!r}") from None
        if tid in seen:
            raise ConlluError(lineno, f"duplicate id {tid}")
        seen.add(tid)
        try:
            head = int(cols[6])
        except ValueError:
            raise ConlluError(lineno, f"non-integer head {cols[6]!r}") from None
        tokens.append(
            Token(
                id=tid, form=cols[1], lemma=cols[2], upos=cols[3], xpos=cols[4], feats=cols[5],
                head=head, deprel=cols[7], deps=cols[8], misc=cols[9],
            )
        )
    for expected, (lineno, tok) in enumerate(zip((r[0] for r in rows), tokens), start=1):
        if tok.id != expected:
            raise ConlluError(lineno, f"token ids not contiguous: expected {expected}, got {tok.id}")
    validate_tree([t.head for t in tokens], allow_multi_root, line=start)
    return Sentence(tuple(tokens), tuple(comments))


def parse_conllu(text: str, allow_multi_root: bool = False) -> list[Sentence]:
    """Parse CoNLL-U text into validated sentences of syntactic words.

    Multiword-token ranges (``1-2``) and empty nodes (``1.1``) are skipped.
    """
    sentences: list[Sentence] = []
    rows: list[tuple[int, list[str]]] = []
    comments: list[str] = []
    start = 1
    lines = text.split("\n")
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r")
        if not line.strip():
            if rows:
                sentences.append(_finish(rows, comments, start, allow_multi_root))
            elif comments:
                raise ConlluError(lineno, "comment block without tokens")
            rows, comments = [], []
            start = lineno + 1
            continue
        if line.startswith("#"):
            if rows:
                raise ConlluError(lineno, "comment inside token block")
            comments.append(line)
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConlluError(lineno, f"expected 10 tab-separated columns, got {len(cols)}")
        if "-" in cols[0] or "." in cols[0]:
            continue
        rows.append((lineno, cols))
    if rows:
        sentences.append(_finish(rows, comments, start, allow_multi_root))
    elif comments:
        raise ConlluError(len(lines), "comment block without tokens")
    return sentences


def read_conllu(path: Union[str, Path], allow_multi_root: bool = False) -> list[Sentence]:
    return parse_conllu(Path(path).read_text(encoding="utf-8"), allow_multi_root)


def write_conllu(sentences: Sequence[Sentence], predictions: Optional[Sequence] = None) -> str:
    """Serialise sentences; ``predictions`` (objects with ``heads``, ``labels``
    and ``tags``) replace HEAD, DEPREL and UPOS when given."""
    if predictions is not None and len(predictions) != len(sentences):
        raise ValueError(f"{len(predictions)} predictions for {len(sentences)} sentences")
    out: list[str] = []
    for k, sent in enumerate(sentences):
        pred = predictions[k] if predictions is not None else None
        if pred is not None:
            n = len(sent)
            if not (len(pred.heads) == len(pred.labels) == len(pred.tags) == n):
                raise ValueError(f"sentence {k}: prediction length does not match {n} tokens")
        out.extend(sent.comments)
        for i, t in enumerate(sent.tokens):
            upos, head, deprel = t.upos, t.head, t.deprel
            if pred is not None:
                upos, head, deprel = pred.tags[i], pred.heads[i], pred.labels[i]
            cols = [str(t.id), t.form, t.lemma, upos, t.xpos, t.feats, str(head), deprel, t.deps, t.misc]
            out.append("\t".join(c if c != "" else "_" for c in cols))
        out.append("")
    return "\n".join(out) + ("\n" if out else "")


# ---------------------------------------------------------------- raw corpus


@dataclass
class RawCorpus:
    sentences: list[list[str]]

    @property
    def token_count(self) -> int:
        return sum(len(s) for s in self.sentences)

    @property
    def sentence_count(self) -> int:
        return len(self.sentences)

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "RawCorpus":
        sents = [line.split() for line in lines]
        return cls([s for s in sents if s])

    @classmethod
    def from_text(cls, text: str) -> "RawCorpus":
        return cls.from_lines(text.split("\n"))

    def words(self) -> Iterable[str]:
        for s in self.sentences:
            yield from s


def read_raw_corpus(path: Union[str, Path]) -> RawCorpus:
    with open(path, encoding="utf-8") as fh:
        return RawCorpus.from_lines(fh)


def top_k_words(corpus: RawCorpus, k: int) -> list[tuple[str, int]]:
    """Most frequent words, ties broken lexicographically."""
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = Counter(corpus.words())
    if not counts:
        raise ValueError("empty corpus")
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


@dataclass(frozen=True)
class CoverageReport:
    token_count: int
    covered: int
    mean_segments: Optional[float]

    @property
    def fraction(self) -> float:
        return self.covered / self.token_count


def vocab_coverage(
    vocab: Iterable[str], corpus: RawCorpus, segmenter: Optional[Callable[[str], Sequence]] = None
) -> CoverageReport:
    """Share of corpus tokens found verbatim in ``vocab``; optionally the mean
    number of segments per token under ``segmenter``."""
    vocab = set(vocab)
    if not vocab:
        raise ValueError("empty vocabulary")
    counts = Counter(corpus.words())
    total = sum(counts.values())
    if total == 0:
        raise ValueError("empty corpus")
    covered = sum(c for w, c in counts.items() if w in vocab)
    mean_segments = None
    if segmenter is not None:
        mean_segments = sum(len(segmenter(w)) * c for w, c in counts.items()) / total
    return CoverageReport(total, covered, mean_segments)


# ---------------------------------------------------------------- noise


@dataclass(frozen=True)
class NoiseRule:
    pattern: str
    replacement: str
    prob: float = 1.0


# Romanisation habits seen in Arabizi plus French code-switch shortenings.
DEFAULT_RULES = (
    NoiseRule("ou", "u", 0.5),
    NoiseRule("eau", "o", 0.5),
    NoiseRule("kh", "5", 0.5),
    NoiseRule("q", "9", 0.5),
    NoiseRule("aa", "3", 0.5),
    NoiseRule("ch", "sh", 0.3),
    NoiseRule("h", "7", 0.2),
    NoiseRule("k", "9", 0.1),
    NoiseRule("i", "y", 0.2),
)

VOWELS = frozenset("aeiouy")


@dataclass(frozen=True)
class NoiseRuleSet:
    rules: tuple[NoiseRule, ...] = DEFAULT_RULES
    word_prob: float = 0.3
    vowel_drop_rate: float = 0.1
    insert_rate: float = 0.0
    delete_rate: float = 0.0
    substitute_rate: float = 0.02
    duplicate_rate: float = 0.05
    alphabet: str = "abcdefghijklmnopqrstuvwxyz3579"
    seed: int = 0

    def __post_init__(self):
        rates = [self.word_prob, self.vowel_drop_rate, self.insert_rate, self.delete_rate,
                 self.substitute_rate, self.duplicate_rate] + [r.prob for r in self.rules]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("noise probabilities must lie in [0, 1]")

    @classmethod
    def identity(cls, seed: int = 0) -> "NoiseRuleSet":
        return cls(rules=(), word_prob=0.0, vowel_drop_rate=0.0, insert_rate=0.0, delete_rate=0.0,
                   substitute_rate=0.0, duplicate_rate=0.0, seed=seed)

    def to_config(self) -> dict:
        d = dataclasses.asdict(self)
        d["rules"] = [[r.pattern, r.replacement, r.prob] for r in self.rules]
        return d

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseRuleSet":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise flatconfig.ConfigError(f"unknown noise keys: {sorted(unknown)}")
        kw = dict(cfg)
        if "rules" in kw:
            kw["rules"] = tuple(NoiseRule(*r) for r in kw["rules"])
        return cls(**kw)

    def dumps(self) -> str:
        return flatconfig.dumps(self.to_config())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NoiseRuleSet":
        return cls.from_config(flatconfig.load(path))


def noise_word(word: str, rules: NoiseRuleSet, rng: np.random.Generator) -> str:
    if rng.random() >= rules.word_prob:
        return word
    for rule in rules.rules:
        if rule.pattern and rule.pattern in word and rng.random() < rule.prob:
            word = word.replace(rule.pattern, rule.replacement)
    out: list[str] = []
    for ch in word:
        if ch.lower() in VOWELS and rng.random() < rules.vowel_drop_rate:
            continue
        if rng.random() < rules.delete_rate:
            continue
        if rng.random() < rules.substitute_rate:
            ch = rules.alphabet[rng.integers(len(rules.alphabet))]
        out.append(ch)
        if ch.lower() not in VOWELS and rng.random() < rules.duplicate_rate:
            out.append(ch)
        if rng.random() < rules.insert_rate:
            out.append(rules.alphabet[rng.integers(len(rules.alphabet))])
    # never erase a word completely
    return "".join(out) or word


def inject_noise(
    sentence: Sentence, rules: NoiseRuleSet, rng: Optional[np.random.Generator] = None
) -> Sentence:
    """Rewrite word forms with orthographic noise; everything else is kept.

    Without ``rng`` a fresh generator seeded from ``rules.seed`` is used, so
    the call is deterministic.
    """
    rng = rng if rng is not None else np.random.default_rng(rules.seed)
    tokens = tuple(dataclasses.replace(t, form=noise_word(t.form, rules, rng)) for t in sentence.tokens)
    return Sentence(tokens, sentence.comments)


def noise_treebank(sentences: Sequence[Sentence], rules: NoiseRuleSet) -> list[Sentence]:
    rng = np.random.default_rng(rules.seed)
    return [inject_noise(s, rules, rng) for s in sentences]


def noise_words(words: Iterable[str], rules: NoiseRuleSet, rng: np.random.Generator) -> list[str]:
    return [noise_word(w, rules, rng) for w in words]
