"""Acceptance suite: one PASS/FAIL line per primary criterion.

Each test prints its verdict with the measured numbers before asserting, so
``pytest -v tests/test_acceptance.py`` doubles as a report. The robustness
check is reported only; its direction is an empirical expectation, not a
contract.
"""

import time

import numpy as np
import pytest

from charparse.autodiff import Parameter, Tensor, grad_check, ops, precision
from charparse.char_encoder import CharEncoder, CharEncoderConfig, CharVocab, Highway, encode_chars
from charparse.cli import main
from charparse.corpus import NoiseRuleSet, RawCorpus
from charparse.encoder import (
    AggregationSpec,
    EncoderConfig,
    EncoderOutput,
    MlmHead,
    ScalarMix,
    TransformerEncoder,
    aggregate,
    mlm_loss,
)
from charparse.evaluation import robustness_report, score, significance
from charparse.mst import decode_heads
from charparse.parser import ParseTree, Parser, ParserConfig, Vocabularies
from charparse.subword import average_pieces
from charparse.synthetic import generate_corpus, generate_treebank, toy_splits
from charparse.training import (
    TrainConfig,
    build_model,
    encoder_blob,
    evaluate_task,
    finetune_task,
    pretrain_mlm,
)
from helpers import jitter, metric_fixtures, sentence, tree
from test_mst import brute_force, random_arc, total

N_CONFIGS = 20
GRAD_TOL = 1e-5


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok

    return emit


# ---------------------------------------------------------------- gradients


def _char_cnn(rng):
    words = ["".join(rng.choice(list("abc3éw"), size=rng.integers(1, 7))) for _ in range(rng.integers(2, 5))]
    cfg = CharEncoderConfig(char_emb_dim=int(rng.integers(2, 6)),
                            kernels=[[int(w), int(rng.integers(1, 4))] for w in sorted(rng.choice(5, 2, False) + 1)],
                            n_highway=int(rng.integers(0, 3)), d_model=int(rng.integers(2, 7)), max_word_len=8)
    enc = jitter(CharEncoder(cfg, CharVocab.build(words), rng), rng)
    ids = np.stack([encode_chars(w, enc.vocab, cfg.max_word_len) for w in words])
    c = rng.normal(size=(len(words), cfg.d_model))
    return lambda: ops.sum(enc.embed_ids(ids) * c), enc.parameters()


def _highway(rng):
    d = int(rng.integers(2, 9))
    hw = jitter(Highway(d, rng), rng)
    x = Parameter(rng.normal(size=(int(rng.integers(1, 5)), d)), "x")
    c = rng.normal(size=x.shape)
    return lambda: ops.sum(hw(x) * c), [x] + hw.parameters()


def _block(rng):
    heads = int(rng.integers(1, 3))
    # layer norm over two features is almost constant (+-1), leaving only roundoff to compare
    d = heads * int(rng.integers(4 // heads, 5))
    n = int(rng.integers(2, 6))
    enc = jitter(TransformerEncoder(EncoderConfig(n_layers=1, n_heads=heads, d_model=d, d_ff=int(rng.integers(2, 9)),
                                                  max_seq_len=8, dropout=0.0), rng), rng)
    x = Parameter(rng.normal(size=(1, n, d)), "x")
    mask = np.ones((1, n), bool)
    mask[0, rng.integers(1, n + 1):] = False
    c = rng.normal(size=x.shape)
    return lambda: ops.sum(enc(x, mask).hidden[-1] * c), [x] + enc.parameters()


def _scalar_mix(rng):
    k = int(rng.integers(1, 6))
    mix = ScalarMix(k)
    mix.s.data[:] = rng.normal(size=k)
    mix.gamma.data[:] = rng.normal()
    hs = [Parameter(rng.normal(size=(3, 4)), f"h{j}") for j in range(k)]
    c = rng.normal(size=(3, 4))
    return lambda: ops.sum(mix(hs) * c), hs + mix.parameters()


def _parser(rng):
    cfg = ParserConfig(word_dim=int(rng.integers(2, 6)), tag_dim=int(rng.integers(2, 5)),
                       tagger_hidden=int(rng.integers(2, 8)), arc_dim=int(rng.integers(2, 7)),
                       label_dim=int(rng.integers(2, 6)), dropout=0.0)
    d_lm = int(rng.integers(2, 6))
    sents = generate_treebank(20, seed=int(rng.integers(1000)))
    parser = jitter(Parser(cfg, Vocabularies.build(sents, cfg), d_lm, rng), rng)
    return parser, sents, d_lm


def _tagger(rng):
    parser, _, d_lm = _parser(rng)
    n = int(rng.integers(1, 6))
    wv = Parameter(rng.normal(size=(n, parser.cfg.word_dim)), "wv")
    lm = Parameter(rng.normal(size=(n, d_lm)), "lm")
    c = rng.normal(size=(n, len(parser.vocabs.tags)))
    return lambda: ops.sum(parser.tag_logits(wv, lm) * c), [wv, lm] + parser.tagger.parameters()


def _biaffine(rng):
    parser, _, _ = _parser(rng)
    n = int(rng.integers(1, 6))
    reprs = Parameter(rng.normal(size=(n, parser.d_repr)), "r")
    ca = rng.normal(size=(n + 1, n))
    cl = rng.normal(size=(n + 1, n, len(parser.vocabs.labels)))

    def fn():
        arc, labels = parser.biaffine_scores(reprs)
        finite = np.isfinite(arc.data)
        return ops.sum(ops.getitem(arc, finite) * Tensor(ca[finite])) + ops.sum(labels * cl)

    skip = ("word_emb", "tag_emb", "tagger")
    params = [p for name, p in parser.named_parameters() if name.split(".")[0] not in skip]
    return fn, [reprs] + params


def _mlm_head(rng):
    d = int(rng.integers(2, 7))
    head = jitter(MlmHead([f"w{i}" for i in range(int(rng.integers(2, 9)))], d, rng), rng)
    n = int(rng.integers(1, 6))
    x = Parameter(rng.normal(size=(n, d)), "h")
    targets = rng.integers(-1, len(head.vocab), size=n)
    targets[0] = 0
    return lambda: mlm_loss(EncoderOutput([x], np.ones(n, bool)), targets, head).loss, [x] + head.parameters()


def _averaging(rng):
    groups = [int(g) for g in rng.integers(1, 4, size=rng.integers(1, 5))]
    p = Parameter(rng.normal(size=(sum(groups), int(rng.integers(1, 5)))), "pieces")
    c = rng.normal(size=(len(groups), p.shape[1]))
    return lambda: ops.sum(average_pieces(p, groups) * c), [p]


COMPONENTS = {
    "char-CNN": _char_cnn,
    "highway": _highway,
    "transformer block": _block,
    "scalar mix": _scalar_mix,
    "tagger MLP": _tagger,
    "biaffine scorers": _biaffine,
    "MLM head": _mlm_head,
    "subword averaging": _averaging,
}


def test_gradient_correctness(report):
    start = time.perf_counter()
    worst = {}
    with precision("f64"):
        for name, build in COMPONENTS.items():
            errs = []
            for k in range(N_CONFIGS):
                fn, params = build(np.random.default_rng(1000 * k + len(name)))
                errs.append(grad_check(fn, params, max_coords=6, rng=np.random.default_rng(k)))
            worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < GRAD_TOL and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report("gradient correctness", ok, f"{N_CONFIGS} configs each, worst {detail}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- decoding


def test_decoding_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for k in range(200):
        n = 2 + k % 5
        arc = random_arc(rng, n)
        if k % 4 == 0:  # integer scores force ties
            arc = np.where(np.isfinite(arc), np.round(arc * 2), arc)
        heads = decode_heads(arc)
        single_root = sum(h == 0 for h in heads) == 1
        if not single_root or not np.isclose(total(arc, heads), brute_force(arc)):
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60
    report("decoding oracle", ok, f"200 matrices n=2..6, {mismatches} mismatches; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- training behaviour


def test_overfit_toy_treebank(report):
    start = time.perf_counter()
    train, _, _, _ = toy_splits(seed=0)
    assert len(train) == 16
    model = build_model(RawCorpus([s.words for s in train]), "character", 0, EncoderConfig(), CharEncoderConfig(),
                        5000, 2000, 0.15)
    assert (model.enc_cfg.n_layers, model.enc_cfg.d_model) == (4, 128)
    # one step per epoch with the whole treebank as the batch
    cfg = TrainConfig(batch_size=16, epochs=300, max_steps=300, early_stopping=False)
    result = finetune_task(model, train, None, cfg, ParserConfig())
    rep = evaluate_task(model, train)
    elapsed = time.perf_counter() - start
    ok = rep.upos >= 99.0 and rep.uas >= 95.0 and len(result.losses) <= 300 and elapsed < 600
    report("overfit", ok, f"train UPOS/UAS/LAS {rep.triplet()} after {len(result.losses)} steps; {elapsed:.0f}s")
    assert ok


def test_mlm_learning(report):
    start = time.perf_counter()
    corpus = generate_corpus(2000, seed=0)
    model = build_model(corpus, "character", 0, EncoderConfig(), CharEncoderConfig(), 5000, 2000, 0.15)
    result = pretrain_mlm(model, corpus, TrainConfig(seed=0, epochs=5))
    losses = [m.dev_metric for m in result.metrics]
    ratio = min(losses[1:]) / losses[0]
    elapsed = time.perf_counter() - start
    ok = ratio <= 0.8 and elapsed < 1800
    report("MLM learning", ok, f"held-out {losses[0]:.3f} -> {min(losses[1:]):.3f} (ratio {ratio:.3f}); {elapsed:.0f}s")
    assert ok


def test_regime_wiring(report):
    start = time.perf_counter()
    with_mlm, task_only = [], []
    for seed in (0, 1, 2):
        train, dev, _, raw = toy_splits(seed=seed, n_raw=2000)
        for pretrain, bucket in ((True, with_mlm), (False, task_only)):
            model = build_model(raw, "character", seed, EncoderConfig(), CharEncoderConfig(), 5000, 2000, 0.15)
            if pretrain:
                pretrain_mlm(model, raw, TrainConfig(seed=seed, epochs=5))
            finetune_task(model, train, dev, TrainConfig(seed=seed, batch_size=4), ParserConfig())
            bucket.append(evaluate_task(model, dev).las)
    a, b = float(np.median(with_mlm)), float(np.median(task_only))
    elapsed = time.perf_counter() - start
    ok = a >= b
    report("regime wiring", ok, f"dev LAS median MLM+Task {a:.2f} {with_mlm} vs Task {b:.2f} {task_only}; "
                                f"{elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def tiny_setup():
    train, dev, _, raw = toy_splits(seed=0, n_train=8, n_dev=6, n_raw=40)
    enc = EncoderConfig(n_layers=3, n_heads=2, d_model=32, d_ff=64, max_seq_len=64)
    char = CharEncoderConfig(char_emb_dim=8, kernels=[[1, 8], [2, 8], [3, 8]], n_highway=1, d_model=32)
    parser = ParserConfig(word_dim=16, tag_dim=8, tagger_hidden=32, arc_dim=32, label_dim=16)

    def fresh(source="character"):
        return build_model(raw, source, 0, EncoderConfig(**{**enc.__dict__, "source": source}),
                           char if source == "character" else None, 200, 120, 0.15)

    return train, dev, fresh, parser


def test_frozen_contract(report, tiny_setup):
    train, dev, fresh, parser = tiny_setup
    changed = {}
    for agg in ("last", "mean", "scalar-mix"):
        for frozen in (True, False):
            model = fresh()
            before = encoder_blob(model)
            finetune_task(model, train, dev, TrainConfig(epochs=1, batch_size=4, agg=agg, frozen=frozen), parser)
            changed[f"{agg}-{'fz' if frozen else 'ft'}"] = encoder_blob(model) != before
    ok = all(changed[k] == k.endswith("-ft") for k in changed)
    report("frozen contract", ok, ", ".join(f"{k} {'changed' if v else 'identical'}" for k, v in changed.items()))
    assert ok


def test_aggregation_identities(report, tiny_setup):
    train, _, fresh, parser = tiny_setup
    rng = np.random.default_rng(0)
    L = 4
    with precision("f64"):
        out = EncoderOutput([Tensor(rng.normal(size=(5, 6))) for _ in range(L)], np.ones(5, bool))
        last = aggregate(out, AggregationSpec(mode="last_layer")).data
        mean = aggregate(out, AggregationSpec(layers=(L - 1,), mode="mean")).data
        mix = aggregate(out, AggregationSpec(layers=(L - 1,), mode="scalar_mix"), ScalarMix(1)).data
    exact = np.array_equal(last, mean) and np.array_equal(last, mix)
    result = finetune_task(fresh(), train, None, TrainConfig(epochs=2, batch_size=2, agg="scalar-mix"), parser)
    sums = np.array(result.mix_weight_sums)
    drift = float(np.abs(sums - 1.0).max())
    ok = exact and len(sums) == len(result.losses) and drift <= 1e-6
    report("aggregation identities", ok, f"last == mean{{L-1}} == mix{{L-1}}: {exact}; "
                                         f"mix sums over {len(sums)} steps within {drift:.1e} of 1")
    assert ok


# ---------------------------------------------------------------- evaluation


def test_metrics_fixtures(report):
    got = {name: score(gold, pred).triplet() for name, gold, pred, _ in metric_fixtures()}
    want = {name: expected for name, _, _, expected in metric_fixtures()}
    order_ok = all(score(g, p).las <= score(g, p).uas for _, g, p, _ in metric_fixtures())

    rng = np.random.default_rng(0)
    gold, right, wrong = [], [], []
    for _ in range(30):
        n = int(rng.integers(2, 6))
        heads = [0] + [1] * (n - 1)
        s = sentence(heads, ["root"] + ["dep"] * (n - 1), ["X"] * n)
        gold.append(s)
        right.append(tree(heads, s.deprels, s.tags))
        wrong.append(tree([2] + [0] + [2] * (n - 2), ["bad"] * n, ["Y"] * n))
    a = score(gold, right)
    p_same = significance(a, a, "las", 10_000, seed=0)
    p_diff = significance(a, score(gold, wrong), "las", 10_000, seed=0)
    ok = got == want and order_ok and p_same == 1.0 and p_diff < 0.01
    report("metrics fixtures", ok, f"{sum(got[k] == want[k] for k in want)}/{len(want)} fixtures exact, "
                                   f"p(identical)={p_same:.4f}, p(all-right vs all-wrong)={p_diff:.4f}")
    assert ok


def test_determinism_via_emitted_config(report, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "data"), "--train-size", "8", "--dev-size", "6",
                 "--raw-size", "40"]) == 0
    small = ["--set", "encoder.n_layers=2", "--set", "encoder.d_model=32", "--set", "encoder.n_heads=2",
             "--set", "encoder.d_ff=64", "--set", "char.kernels=[[1, 8], [2, 8]]", "--set", "model.mlm_vocab_size=200",
             "--epochs", "2"]
    d = tmp_path / "data"
    runs = {
        "pretrain": ["pretrain", "--corpus", str(d / "raw.txt")],
        "finetune": ["finetune", "--train", str(d / "train.conllu"), "--dev", str(d / "dev.conllu"),
                     "--agg", "scalar-mix"],
    }
    same = {}
    for name, args in runs.items():
        first, second = tmp_path / f"{name}1", tmp_path / f"{name}2"
        assert main(args + small + ["--out", str(first)]) == 0
        assert main([name, "--config", str(first / "config.toml"), "--out", str(second)]) == 0
        same[name] = (first / "metrics.tsv").read_bytes() == (second / "metrics.tsv").read_bytes()
    ok = all(same.values())
    report("determinism", ok, ", ".join(f"{k} re-run {'identical' if v else 'differs'}" for k, v in same.items()))
    assert ok


def test_robustness_direction(report, tiny_setup):
    """Reported, never failing: the expected direction is an empirical claim."""
    _, _, _, parser = tiny_setup
    rules = NoiseRuleSet(word_prob=0.3)
    unk_up, char_better, lines = 0, 0, []
    for seed in (0, 1, 2):
        train, dev, _, raw = toy_splits(seed=seed, n_raw=300)
        models = {}
        for source in ("character", "subword"):
            enc = EncoderConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, max_seq_len=64, source=source)
            char = CharEncoderConfig(char_emb_dim=8, kernels=[[1, 8], [2, 8], [3, 8]], n_highway=1, d_model=32)
            model = build_model(raw, source, seed, enc, char if source == "character" else None, 500, 200, 0.15)
            finetune_task(model, train, dev, TrainConfig(seed=seed, batch_size=4, epochs=10), parser)
            models[source] = model
        rep = robustness_report(models["character"], models["subword"], dev,
                                NoiseRuleSet(word_prob=rules.word_prob, seed=seed))
        c, s = rep.row("character"), rep.row("subword")
        drop_c, drop_s = c.clean.upos - c.noisy.upos, s.clean.upos - s.noisy.upos
        unk_up += s.unk_noisy > s.unk_clean
        char_better += drop_c <= drop_s
        lines.append(f"seed {seed}: UNK {s.unk_clean:.1f}->{s.unk_noisy:.1f}, UPOS drop char {drop_c:.2f} "
                     f"subword {drop_s:.2f}")
    ok = unk_up == 3 and char_better >= 2
    report("robustness direction (reported only)", ok, "; ".join(lines))
