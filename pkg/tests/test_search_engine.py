"""Supernet training, candidate ranking under budget, retraining, checkpoints."""

import numpy as np
import pytest

from relnas.autodiff import ContractViolation
from relnas.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from relnas.data import make_synthetic_corpus
from relnas.distill import RuleTeacher, generate_teacher_data
from relnas.model import ModelConfig, RelevanceModel, cost_model_for
from relnas.search import (
    EmptySearchError,
    EncodedRecords,
    RetrainConfig,
    SearchConfig,
    SearchTrace,
    baseline_genomes,
    evaluate_kd_loss,
    model_checksum,
    retrain_best,
    search_candidates,
    split_records,
    train_supernet,
)
from relnas.search_space import enumerate_small, sample_uniform
from relnas.tokenizer import build_vocab


def tiny_model_config(**kw):
    base = dict(vocab_size=512, emb_dim=8, hidden=16, d_rep=8, n_layers=2,
                len_query=4, len_ad=16, dropout_keep_prob=1.0, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return make_synthetic_corpus(400, vocab_seed=3, noise=0.0, seed=11,
                                 n_content_words=60, n_filler_words=30)


@pytest.fixture(scope="module")
def records(corpus):
    train, _, _ = corpus
    teacher = RuleTeacher()
    pairs = [(r.query, r.ad) for r in train.records[:160]]
    return generate_teacher_data(teacher, pairs)


@pytest.fixture(scope="module")
def vocab(corpus):
    train, _, _ = corpus
    return build_vocab((f"{r.query} {r.ad}" for r in train.records), max_size=512)


def fresh_supernet(vocab, seed=0, **cfg_kw):
    cfg = tiny_model_config(**cfg_kw)
    return RelevanceModel(cfg, vocab, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

def test_split_records_disjoint_and_deterministic(records):
    a_train, a_val = split_records(records, 0.25, seed=5)
    b_train, b_val = split_records(records, 0.25, seed=5)
    assert len(a_val) == round(0.25 * len(records))
    assert len(a_train) + len(a_val) == len(records)
    assert [r.query for r in a_val] == [r.query for r in b_val]
    train_keys = {(r.query, r.ad) for r in a_train}
    assert all((r.query, r.ad) not in train_keys for r in a_val)


def test_supernet_training_covers_ops_and_preserves_unsampled(vocab, records):
    model = fresh_supernet(vocab, seed=1, n_layers=1)
    config = SearchConfig(epochs=4, batch_size=4, lr_max=1e-3, seed=9,
                          m_candidates=8, val_fraction=0.2)
    snapshot = {
        key: {n: t.data.copy() for n, t in slot.tensors.items()}
        for key, slot in model.towers["query"].slots.items()
    }
    trace = train_supernet(model, records[:40], config)
    steps = [r for r in trace.records if r["kind"] == "supernet_step"]
    assert len(steps) == 4 * 10
    sampled_ops = {r["genome"].split(",")[0] for r in steps}
    assert len(sampled_ops) == 8  # 40 draws cover all ops w.p. ~1 - 8*(7/8)^40
    for (layer, kind), tensors in snapshot.items():
        genome_texts = {r["genome"].split(",")[0] for r in steps}
        if kind not in genome_texts:
            slot = model.towers["query"].slots[(layer, kind)]
            for n, before in tensors.items():
                np.testing.assert_array_equal(slot.tensors[n].data, before)


def test_supernet_loss_decreases(vocab, records):
    model = fresh_supernet(vocab, seed=2)
    config = SearchConfig(epochs=6, batch_size=16, lr_max=3e-3, t_cycle=6,
                          seed=3, m_candidates=8)
    trace = train_supernet(model, records, config)
    losses = [r["loss"] for r in trace.records if r["kind"] == "supernet_step"]
    tenth = max(1, len(losses) // 10)
    assert np.mean(losses[-tenth:]) < np.mean(losses[:tenth])


def test_supernet_trace_deterministic(vocab, records):
    config = SearchConfig(epochs=2, batch_size=16, lr_max=1e-3, seed=7, m_candidates=8)
    traces = []
    for _ in range(2):
        model = fresh_supernet(vocab, seed=4)
        traces.append(train_supernet(model, records[:64], config).to_jsonl())
    assert traces[0] == traces[1]


def test_supernet_rejects_fixed_genome_model(vocab, records):
    g = sample_uniform(np.random.default_rng(0), 2)
    cfg = tiny_model_config()
    model = RelevanceModel(cfg, vocab, np.random.default_rng(5), genome=g)
    with pytest.raises(ContractViolation):
        train_supernet(model, records[:8], SearchConfig(epochs=1, batch_size=4, m_candidates=8))


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def _trained_supernet(vocab, records, seed=6):
    model = fresh_supernet(vocab, seed=seed)
    config = SearchConfig(epochs=2, batch_size=32, lr_max=2e-3, seed=seed, m_candidates=8)
    train_supernet(model, records, config)
    return model


def test_search_infinite_budget_accepts_all(vocab, records):
    model = _trained_supernet(vocab, records)
    cm = cost_model_for(model.config)
    config = SearchConfig(epochs=1, batch_size=32, m_candidates=300, seed=1,
                          c_max=float("inf"))
    ranked = search_candidates(model, records[:32], config, cm)
    assert len(ranked) == len(enumerate_small(2))  # exhaustive mode, none rejected
    assert all(c.accepted for c in ranked)
    losses = [c.val_loss for c in ranked]
    assert losses == sorted(losses)


def test_search_budget_below_cheapest_raises(vocab, records):
    model = _trained_supernet(vocab, records)
    cm = cost_model_for(model.config)
    config = SearchConfig(epochs=1, batch_size=32, m_candidates=40, seed=2, c_max=1e-6)
    with pytest.raises(EmptySearchError, match="c_max"):
        search_candidates(model, records[:32], config, cm)


def test_search_matches_exhaustive_enumeration(vocab, records):
    """Top pick equals a brute-force sweep over the whole k=2 space."""
    model = _trained_supernet(vocab, records, seed=8)
    cm = cost_model_for(model.config)
    c_max = 2.0
    config = SearchConfig(epochs=1, batch_size=32, m_candidates=256, seed=3, c_max=c_max)
    ranked = search_candidates(model, records[:48], config, cm)

    data = EncodedRecords.build(records[:48], model)
    best = None
    for g in enumerate_small(2):
        cost = cm.report(g)
        if cost.total > c_max:
            continue
        loss = evaluate_kd_loss(model, g, data, batch_size=config.eval_batch_size)
        key = (loss, cost.total, g.to_text())
        if best is None or key < best[0]:
            best = (key, g)
    assert ranked[0].genome == best[1]


def test_search_does_not_mutate_weights(vocab, records):
    model = _trained_supernet(vocab, records, seed=9)
    cm = cost_model_for(model.config)
    before = model_checksum(model)
    config = SearchConfig(epochs=1, batch_size=32, m_candidates=64, seed=4, c_max=3.0)
    search_candidates(model, records[:32], config, cm)
    assert model_checksum(model) == before


def test_accepted_candidates_respect_budget(vocab, records):
    model = _trained_supernet(vocab, records, seed=10)
    cm = cost_model_for(model.config)
    for c_max in (1.2, 1.6, 2.0):
        config = SearchConfig(epochs=1, batch_size=32, m_candidates=128, seed=5, c_max=c_max)
        try:
            ranked = search_candidates(model, records[:16], config, cm)
        except EmptySearchError:
            continue
        for cand in ranked:
            # independent recomputation
            fresh = cm.report(cand.genome)
            assert fresh.total <= c_max
            assert fresh.total == cand.cost.total


# ---------------------------------------------------------------------------
# Retraining
# ---------------------------------------------------------------------------

def test_retrain_deterministic(vocab, records, corpus):
    _, _, test = corpus
    g = sample_uniform(np.random.default_rng(1), 2)
    cfg = tiny_model_config()
    test_pairs = [(r.query, r.ad, r.label) for r in test.records[:40]]
    results = []
    for _ in range(2):
        _, metrics = retrain_best(g, records[:64], cfg, vocab,
                                  RetrainConfig(epochs=2, batch_size=16, seed=13),
                                  test_pairs=test_pairs)
        results.append(metrics)
    assert results[0] == results[1]
    assert 0.0 <= results[0]["test_pr_auc"] <= 1.0


def test_retrain_rejects_over_budget_genome(vocab, records):
    cfg = tiny_model_config()
    cm = cost_model_for(cfg)
    expensive = baseline_genomes(2)["bigru_chain"]
    with pytest.raises(ContractViolation, match="budget"):
        retrain_best(expensive, records[:16], cfg, vocab,
                     RetrainConfig(epochs=1, batch_size=16),
                     cost_model=cm, c_max=1.0)


def test_baseline_genomes_shapes():
    bs = baseline_genomes(6)
    assert set(bs) == {"conv3_chain", "bigru_chain", "attention_chain",
                       "avgpool_chain", "multi_path_reference"}
    for g in bs.values():
        assert g.n_layers == 6


# ---------------------------------------------------------------------------
# Trace and checkpoint files
# ---------------------------------------------------------------------------

def test_trace_roundtrip(tmp_path):
    trace = SearchTrace()
    trace.add(kind="supernet_step", epoch=0, step=0, genome="conv1,0,0", loss=0.5, lr=0.01)
    trace.add(kind="candidate", genome="conv1,0,0", cost=1.0, size=0.5, time=0.5,
              val_loss=0.4, accepted=True)
    path = tmp_path / "trace.jsonl"
    trace.save(path)
    loaded = SearchTrace.load(path)
    assert loaded.records == trace.records


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "w1": rng.normal(size=(3, 4)),
        "b": rng.normal(size=5).astype(np.float32),
        "count": np.array([3], dtype=np.int64),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tensors, meta={"genome": "conv1,0,0", "note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"genome": "conv1,0,0", "note": "x"}
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name], arr)
        assert loaded[name].dtype == arr.dtype


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_model_state_roundtrip_through_checkpoint(vocab, records, tmp_path):
    g = sample_uniform(np.random.default_rng(3), 2)
    cfg = tiny_model_config()
    model = RelevanceModel(cfg, vocab, np.random.default_rng(20), genome=g)
    score_before = model.score("red shoes", "red shoes cheap")
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model.state_dict(), meta={"genome": g.to_text()})
    tensors, meta = load_checkpoint(path)
    model2 = RelevanceModel(cfg, vocab, np.random.default_rng(999), genome=g)
    model2.load_state_dict(tensors)
    assert model2.score("red shoes", "red shoes cheap") == score_before
