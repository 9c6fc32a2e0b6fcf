"""Twin-tower assembly: embedding, crossing head, scoring, serving factorization."""

import numpy as np
import pytest

from relnas import autodiff as ad
from relnas.autodiff import ComputeGraph, ContractViolation, Tensor, finite_diff_check
from relnas.distill import kd_loss
from relnas.model import ModelConfig, RelevanceModel, crossing_features, fixed_cost, cost_model_for
from relnas.search_space import OP_KINDS, ArchitectureGenome, parse_genome
from relnas.tokenizer import build_vocab, encode


def tiny_config(**kw):
    base = dict(vocab_size=64, emb_dim=4, hidden=8, d_rep=4, n_layers=2,
                len_query=4, len_ad=6, dropout_keep_prob=1.0, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def tiny_genome():
    conv3 = OP_KINDS.index("conv3")
    ap = OP_KINDS.index("avgpool3")
    return ArchitectureGenome((conv3, ap), (0, 1), (0, 0))


@pytest.fixture
def vocab():
    return build_vocab(["red blue green shoes boots hat cheap fast big small"], max_size=64)


@pytest.fixture
def model(vocab):
    rng = np.random.default_rng(0)
    return RelevanceModel(tiny_config(), vocab, rng, genome=tiny_genome())


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------

def test_embed_zero_tables_zero_output(vocab):
    m = RelevanceModel(tiny_config(), vocab, np.random.default_rng(1), genome=tiny_genome())
    m.emb_table.data[:] = 0.0
    out = m.embed_batch([encode("red shoes", vocab, 4)], "query")
    np.testing.assert_array_equal(out.values.data, 0.0)
    np.testing.assert_array_equal(out.mask[0], [1, 1, 0, 0])


def test_embed_one_word_uses_position_zero_only(vocab):
    m = RelevanceModel(tiny_config(), vocab, np.random.default_rng(2), genome=tiny_genome())
    m.emb_table.data[:] = 0.0
    m.pos["query"].data = np.arange(16.0).reshape(4, 4)
    out = m.embed_batch([encode("red", vocab, 4)], "query")
    np.testing.assert_array_equal(out.values.data[0, 0], m.pos["query"].data[0])
    np.testing.assert_array_equal(out.values.data[0, 1:], 0.0)


def test_embed_word_swap_with_zero_positions(vocab):
    m = RelevanceModel(tiny_config(), vocab, np.random.default_rng(3), genome=tiny_genome())
    m.pos["query"].data[:] = 0.0
    a = m.embed_batch([encode("red shoes", vocab, 4)], "query").values.data
    b = m.embed_batch([encode("shoes red", vocab, 4)], "query").values.data
    np.testing.assert_array_equal(a[0, 0], b[0, 1])
    np.testing.assert_array_equal(a[0, 1], b[0, 0])


# ---------------------------------------------------------------------------
# Initial projection
# ---------------------------------------------------------------------------

def test_initial_conv_identity(vocab):
    cfg = tiny_config(emb_dim=8, hidden=8)
    m = RelevanceModel(cfg, vocab, np.random.default_rng(4), genome=tiny_genome())
    m.init_conv_w.data = np.eye(8)
    m.init_conv_b.data[:] = 0.0
    x = m.embed_batch([encode("red shoes big", vocab, 4)], "query")
    out = m.initial_conv(x)
    np.testing.assert_array_equal(out.values.data, x.values.data)


def test_initial_conv_is_positionwise(vocab, model):
    x = model.embed_batch([encode("red shoes big hat", vocab, 4)], "query")
    out = model.initial_conv(x).values.data
    perm = [2, 0, 3, 1]
    x_perm = type(x)(Tensor(x.values.data[:, perm, :].copy()), x.mask[:, perm])
    out_perm = model.initial_conv(x_perm).values.data
    np.testing.assert_array_equal(out_perm, out[:, perm, :])


def test_initial_conv_param_count(model):
    cfg = model.config
    assert model.init_conv_w.size + model.init_conv_b.size == cfg.emb_dim * cfg.hidden + cfg.hidden


# ---------------------------------------------------------------------------
# Crossing head
# ---------------------------------------------------------------------------

def test_crossing_features_exact():
    q = Tensor(np.array([[1.0, 2.0]]))
    a = Tensor(np.array([[3.0, 1.0]]))
    x = crossing_features(q, a)
    np.testing.assert_array_equal(x.data, [[1, 2, 3, 1, 2, 1, 3, 2]])


def test_crossing_features_equal_inputs():
    q = Tensor(np.array([[2.0, -3.0]]))
    x = crossing_features(q, q).data[0]
    np.testing.assert_array_equal(x[4:6], [0.0, 0.0])
    np.testing.assert_array_equal(x[6:8], [4.0, 9.0])


def test_crossing_features_shape_mismatch():
    with pytest.raises(ContractViolation):
        crossing_features(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))))


def test_zero_head_scores_half(model):
    for p in model.head.values():
        p.data[:] = 0.0
    q = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    a = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    np.testing.assert_array_equal(model.crossing(q, a).data, 0.5)


def test_swap_symmetric_feature_blocks():
    rng = np.random.default_rng(5)
    q = Tensor(rng.normal(size=(2, 4)))
    a = Tensor(rng.normal(size=(2, 4)))
    x_qa = crossing_features(q, a).data
    x_aq = crossing_features(a, q).data
    np.testing.assert_array_equal(x_qa[:, 8:], x_aq[:, 8:])  # |q-a| and q*a blocks


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def test_score_deterministic(model):
    s1 = model.score("red shoes", "red shoes cheap fast")
    s2 = model.score("red shoes", "red shoes cheap fast")
    assert s1 == s2


def test_scores_inside_unit_interval(model, vocab):
    rng = np.random.default_rng(6)
    words = ["red", "blue", "green", "shoes", "boots", "hat", "cheap"]
    queries, ads = [], []
    for _ in range(1000):
        queries.append(encode(" ".join(rng.choice(words, 2)), vocab, 4))
        ads.append(encode(" ".join(rng.choice(words, 4)), vocab, 6))
    probs = model.predict_pairs(queries, ads).data
    assert np.all(probs > 0.0) and np.all(probs < 1.0)


def test_tower_independence(model, vocab):
    q_enc = [encode("red shoes", vocab, 4)]
    before = model.tower_representation(q_enc, "query").data.copy()
    for slot in model.towers["ad"].slots.values():
        for t in slot.tensors.values():
            t.data = t.data + 1.0
    w, b = model.downscale["ad"]
    w.data = w.data + 0.5
    after = model.tower_representation(q_enc, "query").data
    np.testing.assert_array_equal(before, after)


def test_fixed_genome_model_allocates_only_needed_slots(model):
    assert set(model.towers["query"].slots) == {(0, "conv3"), (1, "avgpool3")}


def test_supernet_model_allocates_all_slots(vocab):
    m = RelevanceModel(tiny_config(), vocab, np.random.default_rng(7))
    assert len(m.towers["query"].slots) == 2 * len(OP_KINDS)
    with pytest.raises(ContractViolation):
        m.score("red", "blue")  # no genome fixed and none supplied


# ---------------------------------------------------------------------------
# Serving factorization
# ---------------------------------------------------------------------------

def test_precompute_matches_end_to_end_bitwise(model):
    ads = ["red shoes cheap", "blue boots fast", "green hat big small"]
    queries = ["red shoes", "green hat"]
    reps = model.precompute_side(ads, "ad")
    for q in queries:
        for i, ad_text in enumerate(ads):
            assert model.score_with_rep(q, reps[i]) == model.score(q, ad_text)


def test_precompute_empty_list(model):
    reps = model.precompute_side([], "ad")
    assert reps.shape == (0, model.config.d_rep)


# ---------------------------------------------------------------------------
# End-to-end gradients via the distillation loss
# ---------------------------------------------------------------------------

def test_end_to_end_kd_gradient(vocab):
    rng = np.random.default_rng(8)
    m = RelevanceModel(tiny_config(), vocab, rng, genome=tiny_genome())
    queries = [m.encode_text(t, "query") for t in ("red shoes", "blue hat")]
    ads = [m.encode_text(t, "ad") for t in ("red shoes cheap", "green boots")]
    targets = np.array([0.9, 0.2])

    def loss_fn(_):
        probs = m.predict_pairs(queries, ads, training=True)
        return kd_loss(targets, probs)

    checked = {
        "head.w1": m.head["w1"],
        "init_conv.w": m.init_conv_w,
        "query.downscale.w": m.downscale["query"][0],
        "conv.weight": m.towers["ad"].slots[(0, "conv3")].tensors["weight"],
        "emb.pos.query": m.pos["query"],
    }
    for name, p in checked.items():
        report = finite_diff_check(loss_fn, p, eps=1e-5, tol=1e-3)
        assert report.passed, f"{name}: {report}"


def test_kd_gradient_wrt_logit_is_p_minus_y():
    rng = np.random.default_rng(9)
    logits = Tensor(rng.normal(size=5), requires_grad=True)
    y = rng.uniform(0.05, 0.95, size=5)
    with ComputeGraph() as g:
        p = ad.sigmoid(logits)
        g.backward(kd_loss(y, p, reduction="sum"))
    np.testing.assert_allclose(logits.grad, ad.sigmoid(logits).data - y, atol=1e-10)


# ---------------------------------------------------------------------------
# Cost plumbing
# ---------------------------------------------------------------------------

def test_fixed_cost_counts_actual_parameters(vocab):
    cfg = tiny_config()
    m = RelevanceModel(cfg, vocab, np.random.default_rng(10))
    params, _ = fixed_cost(cfg)
    actual = sum(p.size for p in m.fixed_parameters())
    # fixed_cost uses the configured vocab cap; the fixture vocab may be smaller
    adjustment = (cfg.vocab_size - len(vocab)) * cfg.emb_dim
    assert params == actual + adjustment


def test_cost_model_prices_reference(vocab):
    cm = cost_model_for(tiny_config())
    g = parse_genome("conv3,0,0;avgpool3,1,1")
    report = cm.report(g)
    assert report.total > 0
    assert report.raw_params > cm.fixed_params
