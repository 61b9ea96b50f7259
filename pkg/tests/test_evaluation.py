import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charparse.evaluation import (
    REPORT_HEADER,
    EvalReport,
    format_table,
    format_tsv,
    report_rows,
    score,
    significance,
)
from helpers import metric_fixtures, sentence, tree


@pytest.mark.parametrize("name,gold,pred,expected", metric_fixtures(), ids=[f[0] for f in metric_fixtures()])
def test_hand_counted_fixtures(name, gold, pred, expected):
    report = score(gold, pred)
    assert report.triplet() == expected
    assert report.las <= report.uas <= 100.0


def test_errors():
    g = sentence([0, 1], ["root", "obj"], ["VERB", "NOUN"])
    with pytest.raises(ValueError):
        score([], [])
    with pytest.raises(ValueError):
        score([g], [])
    with pytest.raises(ValueError):
        score([g], [tree([0], ["root"], ["VERB"])])


def random_pair(rng, n_sents=8):
    gold, pred = [], []
    for _ in range(n_sents):
        n = int(rng.integers(1, 7))
        heads = [0] + [int(rng.integers(0, i + 1)) for i in range(1, n)]
        rels = [str(x) for x in rng.integers(0, 3, n)]
        tags = [str(x) for x in rng.integers(0, 3, n)]
        gold.append(sentence(heads, rels, tags))
        flip = lambda xs, k: [x if rng.random() > 0.3 else k(x) for x in xs]  # noqa: E731
        pred.append(tree(flip(heads, lambda h: (h + 1) % (n + 1)), flip(rels, lambda r: r + "x"),
                         flip(tags, lambda t: t + "x")))
    return gold, pred


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_las_bounded_by_uas_and_order_invariant(seed):
    rng = np.random.default_rng(seed)
    gold, pred = random_pair(rng)
    a = score(gold, pred)
    assert 0.0 <= a.las <= a.uas <= 100.0
    perm = rng.permutation(len(gold))
    b = score([gold[i] for i in perm], [pred[i] for i in perm])
    assert (a.upos, a.uas, a.las) == (b.upos, b.uas, b.las)
    # LAS equals UAS exactly when every attached token is also labelled right
    labelled_ok = all((c[:, 1] == c[:, 2]).all() for c in a.correct)
    assert (a.las == a.uas) == labelled_ok


# ---------------------------------------------------------------- significance


def outcome_report(per_sentence):
    """Report whose LAS outcome per sentence is a bool vector."""
    correct = [np.repeat(np.asarray(v, bool)[:, None], 3, axis=1) for v in per_sentence]
    return EvalReport(sum(len(v) for v in per_sentence), correct)


def test_identical_systems_give_p_one():
    rng = np.random.default_rng(0)
    gold, pred = random_pair(rng, 20)
    r = score(gold, pred)
    assert significance(r, r, trials=10_000, seed=1) == 1.0


def test_all_correct_vs_all_wrong():
    a = outcome_report([[True] * 3] * 20)
    b = outcome_report([[False] * 3] * 20)
    p = significance(a, b, trials=10_000, seed=0)
    assert p < 0.01
    assert p == pytest.approx(1 / 10_001)


def test_fixed_seed_is_deterministic_and_symmetric_in_expectation():
    rng = np.random.default_rng(3)
    a = outcome_report([rng.random(4) < 0.7 for _ in range(30)])
    b = outcome_report([rng.random(4) < 0.6 for _ in range(30)])
    assert significance(a, b, seed=5) == significance(a, b, seed=5)
    assert significance(a, b, seed=5) == pytest.approx(significance(b, a, seed=9), abs=0.03)


def test_p_value_non_increasing_in_gap():
    base = [[True, False]] * 24
    ps = []
    for k in range(0, 25, 4):
        better = [[True, True]] * k + [[True, False]] * (24 - k)
        ps.append(significance(outcome_report(better), outcome_report(base), trials=4000, seed=0))
    assert all(x >= y for x, y in zip(ps, ps[1:]))
    assert ps[0] == 1.0 and ps[-1] < 0.01


def test_significance_errors():
    a = outcome_report([[True]] * 3)
    with pytest.raises(ValueError):
        significance(a, outcome_report([[True]] * 4))
    with pytest.raises(ValueError):
        significance(a, a, trials=10)


def test_tables():
    name, gold, pred, _ = metric_fixtures()[1]
    rows = report_rows([("last-layer-ft", score(gold, pred))])
    tsv = format_tsv(rows, REPORT_HEADER)
    assert tsv == "strategy\tUPOS\tUAS\tLAS\nlast-layer-ft\t100.00\t66.67\t33.33\n"
    table = format_table(rows, REPORT_HEADER).splitlines()
    assert table[0].split() == list(REPORT_HEADER)
    assert set(table[1]) <= {"-", " "}
    assert table[2].split() == ["last-layer-ft", "100.00", "66.67", "33.33"]
