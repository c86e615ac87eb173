import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from layerlab import numerics as nx
from layerlab.data import TaskSpec, collate, generate_corpus, make_batches
from layerlab.model import BOS, ConfigError, ModelConfig, build_model, forward, logits
from layerlab.numerics import Tensor
from layerlab.probing import (ProbeConfig, ProbeContractError, ProbeFeatures, ProbeParams,
                              ProbeReport, ProbeRow, ProbeTarget, accuracy_counts,
                              assemble_report, evaluate_probe, extract_features,
                              fuse_alignments, init_probe, probe_forward, probe_logits,
                              project_to_target, random_encoder, render_probe_table,
                              run_probe_suite, suite_targets, train_probe)
from layerlab.training import Checkpoint, checkpoint_bytes

from gradcheck import check_gradients
from test_model import _attn_ref, _ffn_ref, _ln

SMALL = ModelConfig(encoder_depth=2, decoder_depth=2, d_model=16, heads=2, d_ff=32,
                    vocab_size=14, dropout=0.0, max_len=16)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(TaskSpec(kind="lexical_swap_reorder", content_vocab=10, max_len=6,
                                    n_dev=30, n_test=30, seed=1), 260)


@pytest.fixture
def frozen():
    return build_model(SMALL).freeze()


def model_hash(model):
    return hashlib.sha256(checkpoint_bytes(Checkpoint.from_model(model, 0))).hexdigest()


# ---------------------------------------------------------------- fusion

I2 = np.eye(2)
ANTI = np.array([[0.0, 1.0], [1.0, 0.0]])


def test_uniform_fusion_of_identity_and_antidiagonal():
    f = fuse_alignments(np.zeros(2), np.stack([I2, ANTI]))
    np.testing.assert_allclose(f.A.data, [[0.5, 0.5], [0.5, 0.5]])


def test_log2_weights_fusion():
    f = fuse_alignments(Tensor(np.array([math.log(2), 0.0])), np.stack([I2, ANTI]))
    np.testing.assert_allclose(f.A.data, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-12)
    np.testing.assert_allclose(f.p.data, [2 / 3, 1 / 3], atol=1e-12)


def test_fused_matrix_is_transposed_to_source_by_target():
    # capture orientation is [tgt, src]; a 3-target x 2-source head
    head = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    f = fuse_alignments(np.zeros(1), head[None])
    assert f.A.shape == (2, 3)
    np.testing.assert_allclose(f.A.data, head.T)


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.float64, 1, elements=st.floats(-5, 5)))
def test_single_head_ignores_weight(w):
    head = np.array([[0.2, 0.8], [0.6, 0.4]])
    np.testing.assert_allclose(fuse_alignments(w, head[None]).A.data, head.T)


def test_weight_count_mismatch():
    with pytest.raises(ConfigError):
        fuse_alignments(np.zeros(3), np.stack([I2, ANTI]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_fusion_invariants(n, T, S, seed):
    rng = np.random.default_rng(seed)
    raw = rng.random((n, T, S)) + 1e-3
    heads = raw / raw.sum(-1, keepdims=True)
    w = rng.normal(scale=3, size=n)
    f = fuse_alignments(w, heads)
    assert abs(f.p.data.sum() - 1) < 1e-6 and (f.p.data >= 0).all()
    np.testing.assert_allclose(f.A.data.sum(axis=0), 1.0, atol=1e-5)
    E = rng.normal(size=(S, 4))
    TE = project_to_target(E, f).data
    assert np.linalg.norm(TE, axis=1).max() <= np.linalg.norm(E, axis=1).max() * (1 + 1e-6)


# ---------------------------------------------------------------- projection

def test_identity_alignment_keeps_rows():
    E = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(project_to_target(E, np.eye(3)).data, E)


def test_hard_alignment_column_picks_first_row():
    E = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(project_to_target(E, np.array([[1.0], [0.0]])).data, [[1.0, 2.0]])


def test_soft_alignment_hand_product():
    e1, e2 = np.array([1.0, 0.0, 2.0]), np.array([0.0, 4.0, -2.0])
    A = np.array([[0.5, 0.25], [0.5, 0.75]])
    out = project_to_target(np.stack([e1, e2]), A).data
    np.testing.assert_allclose(out, [0.5 * e1 + 0.5 * e2, 0.25 * e1 + 0.75 * e2])


def test_projection_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        project_to_target(np.zeros((3, 2)), np.zeros((2, 4)))


# ---------------------------------------------------------------- targets and params

def test_target_contracts():
    with pytest.raises(ProbeContractError):
        ProbeTarget("encoder", 1, "skip_self_attention")
    with pytest.raises(ProbeContractError):
        ProbeTarget("decoder", 0, "skip_cross_attention")
    with pytest.raises(ConfigError):
        ProbeTarget("encoder", 3).check(SMALL)


def test_encoder_probe_has_d_times_k_weights():
    p = init_probe(SMALL, ProbeTarget("encoder", 1))
    assert p.align_weights.shape == (SMALL.decoder_depth * SMALL.heads,)
    assert (p.align_weights.data == 0).all()
    assert p.projection.shape == (16, 16)
    assert init_probe(SMALL, ProbeTarget("decoder", 1)).align_weights is None


def test_unfrozen_model_rejected(small_corpus):
    model = build_model(SMALL)
    with pytest.raises(ProbeContractError):
        train_probe(model, small_corpus, ProbeTarget("decoder", 1), ProbeConfig(steps=1))


# ---------------------------------------------------------------- probe forward

def test_identity_probe_at_top_decoder_layer_is_model_head(frozen, small_corpus):
    b = make_batches(small_corpus.dev, 200)[0]
    probe = init_probe(SMALL, ProbeTarget("decoder", SMALL.decoder_depth), init="identity")
    z = probe_forward(frozen, b, ProbeTarget("decoder", SMALL.decoder_depth), probe).data
    tr = forward(frozen, b.src, b.tgt_in)
    np.testing.assert_allclose(z, logits(frozen, tr.decoder_layer_outputs[-1]).data, atol=1e-5)


def test_encoder_probe_output_has_target_length(frozen, small_corpus):
    b = make_batches(small_corpus.dev, 200)[0]
    t = ProbeTarget("encoder", 1)
    z = probe_forward(frozen, b, t, init_probe(SMALL, t))
    assert z.shape == (len(b), b.labels.shape[1], SMALL.vocab_size)


def _hand_encoder_probe(model, src, tgt_in, projection):
    """1-layer 1-head model, encoder layer-0 probe, stepped by hand in float64."""
    P = {k: v.data.astype(np.float64) for k, v in model.params.items()}
    d = model.config.d_model
    pe = model.positional.astype(np.float64)
    E = np.array([P["embed"][t] * math.sqrt(d) + pe[i] for i, t in enumerate(src)])
    x = E.copy()
    h = np.array([_ln(r, P["enc.0.ln1.gain"], P["enc.0.ln1.bias"]) for r in x])
    x = x + _attn_ref(P, "enc.0.self_attn", h, h, lambda t, s: True, 1)
    h = np.array([_ln(r, P["enc.0.ln2.gain"], P["enc.0.ln2.bias"]) for r in x])
    x = x + _ffn_ref(P, "enc.0.ffn", h)
    mem = np.array([_ln(r, P["enc.final_ln.gain"], P["enc.final_ln.bias"]) for r in x])
    y = np.array([P["embed"][t] * math.sqrt(d) + pe[i] for i, t in enumerate(tgt_in)])
    h = np.array([_ln(r, P["dec.0.ln1.gain"], P["dec.0.ln1.bias"]) for r in y])
    y = y + _attn_ref(P, "dec.0.self_attn", h, h, lambda t, s: s <= t, 1)
    h = np.array([_ln(r, P["dec.0.ln2.gain"], P["dec.0.ln2.bias"]) for r in y])
    q = h @ P["dec.0.cross_attn.q.weight"] + P["dec.0.cross_attn.q.bias"]
    k = mem @ P["dec.0.cross_attn.k.weight"] + P["dec.0.cross_attn.k.bias"]
    s = q @ k.T / math.sqrt(d)
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)          # [tgt, src]
    TE = a @ E                            # = A^T E with A = a^T
    return TE @ projection @ P["embed"].T


def test_encoder_probe_matches_hand_stepped_pipeline():
    cfg = ModelConfig(encoder_depth=1, decoder_depth=1, d_model=8, heads=1, d_ff=16,
                      vocab_size=9, dropout=0.0, max_len=8, seed=4)
    model = build_model(cfg).freeze()
    b = collate([_pair((5, 6), (7, 8))])
    t = ProbeTarget("encoder", 0)
    probe = init_probe(cfg, t, seed=2)
    probe.align_weights.data[:] = 1.7   # irrelevant with a single head
    z = probe_forward(model, b, t, probe).data[0]
    ref = _hand_encoder_probe(model, list(b.src[0]), list(b.tgt_in[0]),
                              probe.projection.data.astype(np.float64))
    np.testing.assert_allclose(z, ref, atol=1e-4)


def _pair(src, tgt):
    from layerlab.data import SentencePair
    return SentencePair(src, tgt)


def test_decoder_features_use_shifted_targets(frozen, small_corpus):
    b = make_batches(small_corpus.dev, 200)[0]
    f = extract_features(frozen, b, ProbeTarget("decoder", 1))
    assert f.labels is b.labels
    assert f.hidden.shape[:2] == b.tgt_in.shape


# ---------------------------------------------------------------- gradients through the probe path

def _float64_model(cfg):
    m = build_model(cfg)
    for p in m.params.values():
        p.data = p.data.astype(np.float64)
    return m.freeze()


def test_probe_path_gradients_match_finite_differences(small_corpus):
    model = _float64_model(SMALL)
    b = make_batches(small_corpus.dev[:3], 200)[0]
    feats = extract_features(model, b, ProbeTarget("encoder", 1))
    feats = ProbeFeatures(feats.hidden.astype(np.float64), feats.labels, feats.heads.astype(np.float64))
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=SMALL.decoder_depth * SMALL.heads)
    P0 = rng.normal(scale=0.2, size=(16, 16))

    def build(w, P):
        probe = ProbeParams(P, w, ProbeTarget("encoder", 1))
        z = probe_logits(model, feats, probe)
        B, T, V = z.shape
        return nx.cross_entropy(nx.reshape(z, (B * T, V)), feats.labels.reshape(-1), 0.0, 0)

    assert check_gradients(build, [w0, P0]) == 4 + 256


# ---------------------------------------------------------------- training contracts

def test_probe_training_leaves_model_bitwise_unchanged(frozen, small_corpus):
    before = model_hash(frozen)
    train_probe(frozen, small_corpus, ProbeTarget("encoder", 2), ProbeConfig(steps=30, eval_interval=10))
    train_probe(frozen, small_corpus, ProbeTarget("decoder", 1, "skip_self_attention"),
                ProbeConfig(steps=30, eval_interval=10))
    assert model_hash(frozen) == before


def test_only_probe_parameters_get_gradients(frozen, small_corpus):
    seen = []

    def on_batch(record):
        seen.append(all(p.grad is None for p in frozen.params.values()))

    run = train_probe(frozen, small_corpus, ProbeTarget("encoder", 1),
                      ProbeConfig(steps=5, eval_interval=5), on_batch=on_batch)
    assert seen and all(seen)
    assert run.probe.trained


def test_fusion_invariants_hold_on_every_probe_batch(frozen, small_corpus):
    checked = []

    def on_batch(record):
        for fused, E, TE in record:
            assert abs(fused.p.data.sum() - 1) < 1e-6
            checked.append(1)
            # columns over unpadded source positions
            assert np.abs(fused.A.data.sum(axis=1) - 1).max() < 1e-5
            assert np.linalg.norm(TE, axis=-1).max() <= np.linalg.norm(E, axis=-1).max() * (1 + 1e-6)

    train_probe(frozen, small_corpus, ProbeTarget("encoder", 2), ProbeConfig(steps=20, eval_interval=10),
                on_batch=on_batch)
    assert len(checked) == 20


def test_probe_training_improves_dev_accuracy(frozen, small_corpus):
    run = train_probe(frozen, small_corpus, ProbeTarget("decoder", 0),
                      ProbeConfig(steps=200, eval_interval=50, lr=1e-2))
    first = run.dev_trace[0][1]
    assert run.best_dev >= first
    assert run.best_dev == max(a for _, a in run.dev_trace)


def test_probe_training_deterministic(frozen, small_corpus):
    cfg = ProbeConfig(steps=15, eval_interval=5)
    a = train_probe(frozen, small_corpus, ProbeTarget("encoder", 1), cfg)
    b = train_probe(frozen, small_corpus, ProbeTarget("encoder", 1), cfg)
    assert a.probe.projection.data.tobytes() == b.probe.projection.data.tobytes()
    assert a.dev_trace == b.dev_trace


# ---------------------------------------------------------------- bypass

@pytest.mark.parametrize("layer", [1, 2])
@pytest.mark.parametrize("abl,prefix", [("skip_self_attention", "self_attn"),
                                        ("skip_cross_attention", "cross_attn")])
def test_bypassed_sublayer_parameters_do_not_reach_probe(small_corpus, layer, abl, prefix):
    model = build_model(SMALL).freeze()
    b = make_batches(small_corpus.dev, 200)[0]
    t = ProbeTarget("decoder", layer, abl)
    probe = init_probe(SMALL, t, seed=3)
    before = probe_forward(model, b, t, probe).data.copy()
    rng = np.random.default_rng(9)
    for k, p in model.params.items():
        if k.startswith(f"dec.{layer - 1}.{prefix}."):
            p.data = rng.normal(size=p.shape).astype(np.float32)
    assert probe_forward(model, b, t, probe).data.tobytes() == before.tobytes()


# ---------------------------------------------------------------- accuracy

def test_all_correct_is_100():
    scores = np.eye(6)[1:][None]
    assert accuracy_counts(scores, np.arange(1, 6)[None]) == (5, 5)


def test_half_correct_is_50():
    scores = np.zeros((1, 4, 6))
    labels = np.array([[4, 5, 2, 0]])   # last position is pad
    scores[0, 0, 4] = scores[0, 1, 3] = scores[0, 2, 2] = 1.0
    c, t = accuracy_counts(scores, labels)
    assert t == 3 and c == 2
    labels = np.array([[4, 5, 0, 0]])
    assert accuracy_counts(scores, labels) == (1, 2)


def test_ties_go_to_lowest_id():
    scores = np.zeros((1, 1, 5))
    assert accuracy_counts(scores, np.array([[1]])) == (0, 1)
    scores[0, 0, [2, 3]] = 1.0
    assert accuracy_counts(scores, np.array([[2]])) == (1, 1)


def test_evaluation_is_deterministic(frozen, small_corpus):
    t = ProbeTarget("encoder", 1)
    probe = init_probe(SMALL, t)
    b = make_batches(small_corpus.test, 200)
    assert evaluate_probe(frozen, b, t, probe) == evaluate_probe(frozen, b, t, probe)


# ---------------------------------------------------------------- reports

def test_suite_layout_row_count():
    ts = suite_targets(SMALL)
    E, D = SMALL.encoder_depth, SMALL.decoder_depth
    assert len(ts) == (E + 1) + (D + 1) + 2 * D


def test_assemble_report_deltas():
    acc = {ProbeTarget("encoder", 0): 40.0, ProbeTarget("encoder", 1): 42.5,
           ProbeTarget("decoder", 0): 10.0, ProbeTarget("decoder", 1): 20.0,
           ProbeTarget("decoder", 1, "skip_self_attention"): 17.0,
           ProbeTarget("decoder", 1, "skip_cross_attention"): 15.5}
    rep = assemble_report(acc)
    assert rep.get("encoder", 0).delta is None
    assert rep.get("encoder", 1).delta == pytest.approx(2.5)
    assert rep.get("decoder", 1).delta == pytest.approx(10.0)
    assert rep.get("decoder", 1, "skip_self_attention").delta == pytest.approx(-3.0)
    assert rep.get("decoder", 1, "skip_cross_attention").delta == pytest.approx(-4.5)


def test_report_csv_round_trip():
    rep = ProbeReport([ProbeRow("encoder", 0, "none", 40.734, None),
                       ProbeRow("encoder", 1, "none", 41.85, 1.116)])
    text = rep.to_csv()
    assert text.splitlines() == ["side,layer,ablation,accuracy,delta",
                                 "encoder,0,none,40.73,", "encoder,1,none,41.85,1.12"]
    assert ProbeReport.from_csv(text).to_csv() == text


def test_markdown_header_has_table_columns():
    rep = ProbeReport([ProbeRow("encoder", 0, "none", 40.73, None),
                       ProbeRow("decoder", 0, "none", 13.72, None)])
    header = render_probe_table(rep).splitlines()[0]
    for col in ("Layer", "Acc", "Δ", "-Self attention", "-Cross attention"):
        assert col in header


def test_small_suite_runs_end_to_end(frozen, small_corpus):
    res = run_probe_suite(frozen, small_corpus, ProbeConfig(steps=4, eval_interval=2))
    E, D = SMALL.encoder_depth, SMALL.decoder_depth
    assert len(res.report.rows) == (E + 1) + (D + 1) + 2 * D
    assert all(0 <= r.accuracy <= 100 for r in res.report.rows)


# ---------------------------------------------------------------- random encoder

def test_random_encoder_keeps_decoder_and_classifier():
    model = build_model(SMALL).freeze()
    rand = random_encoder(model, seed=77)
    assert rand.params["embed"] is model.params["embed"]
    assert rand.params["dec.0.cross_attn.q.weight"] is model.params["dec.0.cross_attn.q.weight"]
    assert not np.array_equal(rand.params["enc.0.ffn.w1"].data, model.params["enc.0.ffn.w1"].data)
    assert "src_embed" in rand.params and "src_embed" not in model.params
    assert rand.frozen


def test_random_encoder_features_keep_trained_alignments(small_corpus):
    model = build_model(SMALL).freeze()
    rand = random_encoder(model, seed=77)
    b = make_batches(small_corpus.dev, 200)[0]
    t = ProbeTarget("encoder", 2)
    mine = extract_features(model, b, t)
    other = extract_features(model, b, t, encoder_model=rand)
    np.testing.assert_array_equal(mine.heads, other.heads)
    assert not np.allclose(mine.hidden, other.hidden)
