"""UPOS/UAS/LAS scoring, approximate-randomization significance and noise robustness reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .corpus import NoiseRuleSet, Sentence, noise_treebank
from .parser import ParseTree

METRICS = ("upos", "uas", "las")


@dataclass
class EvalReport:
    """Token-pooled scores in percent plus per-sentence correctness vectors.

    ``correct[k]`` is a bool array of shape [n_k, 3] with columns
    (tag correct, head correct, head and label correct).
    """

    token_count: int
    correct: list[np.ndarray] = field(repr=False)

    def _pct(self, col: int) -> float:
        total = sum(int(c[:, col].sum()) for c in self.correct)
        return 100.0 * total / self.token_count

    @property
    def upos(self) -> float:
        return self._pct(0)

    @property
    def uas(self) -> float:
        return self._pct(1)

    @property
    def las(self) -> float:
        return self._pct(2)

    def metric(self, name: str) -> float:
        return getattr(self, name)

    def sentence_counts(self, name: str) -> np.ndarray:
        col = METRICS.index(name)
        return np.array([int(c[:, col].sum()) for c in self.correct], dtype=np.int64)

    def triplet(self) -> str:
        return f"{self.upos:.2f}/{self.uas:.2f}/{self.las:.2f}"


def score(gold: Sequence[Sentence], pred: Sequence[ParseTree]) -> EvalReport:
    """All tokens count, punctuation included; labels compared as full strings."""
    if not gold:
        raise ValueError("cannot score an empty sentence list")
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sentences but {len(pred)} predictions")
    correct = []
    total = 0
    for k, (g, p) in enumerate(zip(gold, pred)):
        n = len(g)
        if len(p.heads) != n or len(p.labels) != n or len(p.tags) != n:
            raise ValueError(f"sentence {k}: {n} gold tokens, prediction has {len(p.heads)}")
        tags = np.array([a == b for a, b in zip(g.tags, p.tags)], dtype=bool)
        heads = np.array([a == b for a, b in zip(g.heads, p.heads)], dtype=bool)
        labels = heads & np.array([a == b for a, b in zip(g.deprels, p.labels)], dtype=bool)
        correct.append(np.stack([tags, heads, labels], axis=1).reshape(n, 3))
        total += n
    if total == 0:
        raise ValueError("no tokens to score")
    return EvalReport(total, correct)


def significance(a: EvalReport, b: EvalReport, metric: str = "las", trials: int = 10000,
                 seed: int = 0) -> float:
    """Paired approximate randomization over sentences.

    Each trial swaps the two systems' outcomes on every sentence with
    probability 1/2; p = (#trials with |gap| >= observed + 1) / (trials + 1).
    """
    if trials < 100:
        raise ValueError("use at least 100 trials")
    if len(a.correct) != len(b.correct) or any(
        x.shape != y.shape for x, y in zip(a.correct, b.correct)
    ):
        raise ValueError("reports cover different sentence sets")
    diff = a.sentence_counts(metric) - b.sentence_counts(metric)
    observed = abs(int(diff.sum()))
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 1000
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        signs = np.where(rng.random((m, diff.size)) < 0.5, -1, 1)
        gaps = np.abs(signs @ diff)
        hits += int((gaps >= observed).sum())
        done += m
    return (hits + 1) / (trials + 1)


# ---------------------------------------------------------------- reports


def format_table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    cells = [list(map(str, header))] + [[f"{c:.2f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for j, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_tsv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    out = ["\t".join(header)]
    for r in rows:
        out.append("\t".join(f"{c:.2f}" if isinstance(c, float) else str(c) for c in r))
    return "\n".join(out) + "\n"


REPORT_HEADER = ("strategy", "UPOS", "UAS", "LAS")


def report_rows(named: Sequence[tuple[str, EvalReport]]) -> list[tuple]:
    return [(name, r.upos, r.uas, r.las) for name, r in named]


@dataclass
class RobustnessRow:
    system: str
    clean: EvalReport
    noisy: EvalReport
    unk_clean: Optional[float] = None
    unk_noisy: Optional[float] = None
    pieces_clean: Optional[float] = None
    pieces_noisy: Optional[float] = None


ROBUSTNESS_HEADER = (
    "system", "clean_UPOS", "clean_UAS", "clean_LAS", "noisy_UPOS", "noisy_UAS", "noisy_LAS",
    "d_UPOS", "d_UAS", "d_LAS", "unk_clean", "unk_noisy", "pieces_clean", "pieces_noisy",
)


@dataclass
class RobustnessReport:
    rows: list[RobustnessRow]

    def table_rows(self) -> list[tuple]:
        out = []
        for r in self.rows:
            clean = (r.clean.upos, r.clean.uas, r.clean.las)
            noisy = (r.noisy.upos, r.noisy.uas, r.noisy.las)
            extra = [x if x is not None else "-" for x in (r.unk_clean, r.unk_noisy, r.pieces_clean, r.pieces_noisy)]
            out.append((r.system, *clean, *noisy, *(n - c for c, n in zip(clean, noisy)), *extra))
        return out

    def table(self) -> str:
        return format_table(self.table_rows(), ROBUSTNESS_HEADER)

    def tsv(self) -> str:
        return format_tsv(self.table_rows(), ROBUSTNESS_HEADER)

    def row(self, system: str) -> RobustnessRow:
        return next(r for r in self.rows if r.system == system)


def robustness_report(char_model, subword_model, treebank: Sequence[Sentence],
                      rules: NoiseRuleSet) -> RobustnessReport:
    """Score both fine-tuned pipelines on clean and noise-injected copies of ``treebank``."""
    from .subword import mean_pieces, unk_rate

    noisy = noise_treebank(treebank, rules)
    rows = []
    for name, model in (("character", char_model), ("subword", subword_model)):
        if model is None:
            continue
        clean_rep = score(treebank, model.predict([s.words for s in treebank]))
        noisy_rep = score(noisy, model.predict([s.words for s in noisy]))
        row = RobustnessRow(name, clean_rep, noisy_rep)
        if model.source == "subword":
            vocab = model.embedder.vocab
            clean_words = [w for s in treebank for w in s.words]
            noisy_words = [w for s in noisy for w in s.words]
            row.unk_clean = 100.0 * unk_rate(clean_words, vocab)
            row.unk_noisy = 100.0 * unk_rate(noisy_words, vocab)
            row.pieces_clean = mean_pieces(clean_words, vocab)
            row.pieces_noisy = mean_pieces(noisy_words, vocab)
        rows.append(row)
    return RobustnessReport(rows)
