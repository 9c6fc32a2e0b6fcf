"""Search-space operations: shapes, mask semantics, gradients, cost model."""

import numpy as np
import pytest

from relnas import autodiff as ad
from relnas import layers as ly
from relnas.autodiff import ContractViolation, Parameter, Tensor, finite_diff_check
from relnas.layers import (
    LayerParams,
    LayerSpec,
    SequenceBatch,
    apply_layer,
    attention_weights,
    bigru,
    conv_block,
    dropout,
    init_layer_params,
    layer_cost,
    masked_mean_pool,
    pool,
    self_attention,
)


def _batch(rng, B=2, L=5, h=8, n_valid=None):
    values = Tensor(rng.normal(size=(B, L, h)))
    mask = np.ones((B, L))
    if n_valid is not None:
        for b in range(B):
            mask[b, n_valid[b]:] = 0.0
    return SequenceBatch(values, mask)


# ---------------------------------------------------------------------------
# conv_block
# ---------------------------------------------------------------------------

def test_conv1_identity_kernel_no_bn():
    rng = np.random.default_rng(0)
    h = 6
    x = _batch(rng, B=2, L=4, h=h)
    x.values.data = np.abs(x.values.data)  # non-negative so ReLU passes
    p = LayerParams(kind="conv1", hidden=h)
    p.tensors["weight"] = Parameter(np.eye(h), name="w")
    p.tensors["bias"] = Parameter(np.zeros(h), name="b")
    out = conv_block(x, 1, p)
    np.testing.assert_allclose(out.values.data, x.values.data)


def test_conv_zero_kernel_gives_bn_beta():
    rng = np.random.default_rng(1)
    h = 4
    x = _batch(rng, B=2, L=5, h=h, n_valid=[5, 3])
    p = init_layer_params("conv3", h, rng)
    p.tensors["weight"].data[:] = 0.0
    p.bn.beta.data[:] = np.arange(h, dtype=float)
    out = conv_block(x, 3, p, training=True)
    for b in range(2):
        for t in range(5):
            if x.mask[b, t]:
                np.testing.assert_allclose(out.values.data[b, t], np.arange(h), atol=1e-10)
            else:
                np.testing.assert_allclose(out.values.data[b, t], 0.0)


def test_conv_param_count_closed_form():
    spec = LayerSpec("conv3", hidden=256, length=60)
    params, _ = layer_cost(spec)
    assert params == 3 * 256 * 256 + 256 == 196_864


def test_conv_rejects_bad_kernel():
    rng = np.random.default_rng(2)
    x = _batch(rng)
    p = init_layer_params("conv3", 8, rng)
    with pytest.raises(ContractViolation):
        conv_block(x, 2, p)


def test_conv_rejects_hidden_mismatch():
    rng = np.random.default_rng(2)
    x = _batch(rng, h=8)
    p = init_layer_params("conv3", 16, rng)
    with pytest.raises(ContractViolation):
        conv_block(x, 3, p)


# ---------------------------------------------------------------------------
# pool
# ---------------------------------------------------------------------------

def test_pool_constant_sequence():
    c = 2.5
    x = SequenceBatch(Tensor(np.full((1, 6, 3), c)), np.ones((1, 6)))
    for mode in ("max", "avg"):
        out = pool(x, mode)
        np.testing.assert_allclose(out.values.data, c)


def test_maxpool_center_window():
    vals = np.zeros((1, 3, 1))
    vals[0, :, 0] = [1.0, 5.0, 2.0]
    x = SequenceBatch(Tensor(vals), np.ones((1, 3)))
    out = pool(x, "max")
    assert out.values.data[0, 1, 0] == 5.0


def test_avgpool_boundary_counts_valid_only():
    vals = np.zeros((1, 3, 1))
    vals[0, :, 0] = [3.0, 9.0, 100.0]
    mask = np.array([[1.0, 1.0, 0.0]])
    x = SequenceBatch(Tensor(vals), mask)
    out = pool(x, "avg")
    # position 0: neighbors are (pad, x0, x1) -> mean of 2 valid entries
    assert out.values.data[0, 0, 0] == pytest.approx((3.0 + 9.0) / 2.0)
    # position 1: (x0, x1, masked) -> mean of 2 valid entries
    assert out.values.data[0, 1, 0] == pytest.approx((3.0 + 9.0) / 2.0)


# ---------------------------------------------------------------------------
# bigru
# ---------------------------------------------------------------------------

def test_bigru_zero_params_zero_output():
    rng = np.random.default_rng(3)
    h = 4
    x = _batch(rng, B=2, L=5, h=h)
    p = init_layer_params("bigru", h, rng)
    for t in p.tensors.values():
        t.data[:] = 0.0
    out = bigru(x, p)
    np.testing.assert_allclose(out.values.data, 0.0)


def test_bigru_reversal_symmetry_with_tied_directions():
    rng = np.random.default_rng(4)
    h = 4
    p = init_layer_params("bigru", h, rng)
    for nm in ("w", "u", "b"):
        p.tensors[f"bwd.{nm}"].data = p.tensors[f"fwd.{nm}"].data.copy()
    vals = rng.normal(size=(1, 6, h))
    x = SequenceBatch(Tensor(vals), np.ones((1, 6)))
    x_rev = SequenceBatch(Tensor(vals[:, ::-1, :].copy()), np.ones((1, 6)))
    out = bigru(x, p).values.data
    out_rev = bigru(x_rev, p).values.data
    np.testing.assert_allclose(out_rev, out[:, ::-1, :], atol=1e-12)


def test_bigru_param_count_closed_form():
    h = 16
    spec = LayerSpec("bigru", hidden=h, length=10)
    params, _ = layer_cost(spec)
    assert params == 2 * 3 * (h * h + h * h + h)
    # matches the actual allocation
    p = init_layer_params("bigru", h, np.random.default_rng(0))
    assert sum(t.size for t in p.tensors.values()) == params


# ---------------------------------------------------------------------------
# self_attention
# ---------------------------------------------------------------------------

def test_attention_single_valid_position():
    rng = np.random.default_rng(5)
    h = 8
    x = _batch(rng, B=1, L=4, h=h, n_valid=[1])
    p = init_layer_params("self_attention", h, rng)
    w = attention_weights(x, p)
    assert w[0, :, 0, 0] == pytest.approx(1.0)
    out = self_attention(x, p)
    v_in = x.values.data * x.mask[:, :, None]
    v_proj = v_in[0, 0] @ p.tensors["wv"].data + p.tensors["bv"].data
    expect = v_proj @ p.tensors["wo"].data + p.tensors["bo"].data
    np.testing.assert_allclose(out.values.data[0, 0], expect, atol=1e-12)


def test_attention_uniform_over_identical_tokens():
    rng = np.random.default_rng(6)
    h = 8
    L = 5
    row = rng.normal(size=h)
    vals = np.tile(row, (1, L, 1))
    x = SequenceBatch(Tensor(vals), np.ones((1, L)))
    p = init_layer_params("self_attention", h, rng)
    w = attention_weights(x, p)
    np.testing.assert_allclose(w, 1.0 / L, atol=1e-12)


def test_attention_rows_sum_to_one_over_valid():
    rng = np.random.default_rng(7)
    x = _batch(rng, B=3, L=6, h=8, n_valid=[6, 4, 2])
    p = init_layer_params("self_attention", 8, rng)
    w = attention_weights(x, p)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
    # no weight on masked keys from valid queries
    for b, n in enumerate([6, 4, 2]):
        assert np.all(w[b, :, :n, n:] == 0.0)


def test_attention_rejects_indivisible_hidden():
    with pytest.raises(ContractViolation):
        LayerSpec("self_attention", hidden=12, length=4)
    rng = np.random.default_rng(8)
    x = _batch(rng, h=12)
    p = init_layer_params("self_attention", 8, rng)
    with pytest.raises(ContractViolation):
        self_attention(x, p)


# ---------------------------------------------------------------------------
# Shape preservation and mask invariance, all kinds
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ly.OP_KINDS)
@pytest.mark.parametrize("L,h", [(4, 8), (7, 16)])
def test_shape_preserved(kind, L, h):
    rng = np.random.default_rng(9)
    x = _batch(rng, B=2, L=L, h=h, n_valid=[L, max(1, L - 2)])
    p = init_layer_params(kind, h, rng)
    out = apply_layer(kind, x, p, training=True)
    assert out.values.shape == (2, L, h)
    np.testing.assert_array_equal(out.mask, x.mask)


@pytest.mark.parametrize("kind", ly.OP_KINDS)
def test_mask_invariance(kind):
    rng = np.random.default_rng(10)
    B, L, h = 2, 6, 8
    n_valid = [4, 2]
    base = rng.normal(size=(B, L, h))
    mask = np.ones((B, L))
    for b in range(B):
        mask[b, n_valid[b]:] = 0.0
    garbage = base.copy()
    garbage[mask == 0] = 1e3 * rng.normal(size=garbage[mask == 0].shape)
    p = init_layer_params(kind, h, rng)
    out1 = apply_layer(kind, SequenceBatch(Tensor(base), mask), p, training=True)
    out2 = apply_layer(kind, SequenceBatch(Tensor(garbage), mask), p, training=True)
    valid = mask.astype(bool)
    np.testing.assert_array_equal(out1.values.data[valid], out2.values.data[valid])


# ---------------------------------------------------------------------------
# Gradients through every kind
# ---------------------------------------------------------------------------

def _loss_through(kind, p, base_x, mask):
    def f(t):
        out = apply_layer(kind, SequenceBatch(t, mask), p, training=True)
        return (out.values * out.values).sum()
    return f


@pytest.mark.parametrize("kind", ly.OP_KINDS)
def test_layer_input_gradients(kind):
    rng = np.random.default_rng(11)
    B, L, h = 2, 4, 8
    mask = np.ones((B, L))
    mask[1, 3:] = 0.0
    vals = rng.normal(size=(B, L, h))
    # keep window-max choices stable under the probe step
    vals += np.arange(B * L * h).reshape(B, L, h) * 1e-3
    x = Tensor(vals, requires_grad=True)
    p = init_layer_params(kind, h, rng)
    report = finite_diff_check(_loss_through(kind, p, x, mask), x, eps=1e-5, tol=1e-4)
    assert report.passed, f"{kind}: {report}"


@pytest.mark.parametrize("kind", [k for k in ly.OP_KINDS if k not in ("maxpool3", "avgpool3")])
def test_layer_parameter_gradients(kind):
    rng = np.random.default_rng(12)
    B, L, h = 2, 4, 8
    mask = np.ones((B, L))
    mask[0, 2:] = 0.0
    x = SequenceBatch(Tensor(rng.normal(size=(B, L, h))), mask)
    p = init_layer_params(kind, h, rng)
    for name, t in list(p.tensors.items()):
        def f(_):
            out = apply_layer(kind, x, p, training=True)
            return (out.values * out.values).sum()
        report = finite_diff_check(f, t, eps=1e-5, tol=1e-4)
        assert report.passed, f"{kind}.{name}: {report}"


def test_bn_gamma_beta_gradients():
    rng = np.random.default_rng(13)
    x = SequenceBatch(Tensor(rng.normal(size=(2, 4, 8))), np.ones((2, 4)))
    p = init_layer_params("conv3", 8, rng)
    for t in (p.bn.gamma, p.bn.beta):
        def f(_):
            out = conv_block(x, 3, p, training=True)
            return (out.values * out.values).sum()
        report = finite_diff_check(f, t, eps=1e-5, tol=1e-4)
        assert report.passed, str(report)


# ---------------------------------------------------------------------------
# dropout, pooling to vector
# ---------------------------------------------------------------------------

def test_dropout_eval_is_identity():
    rng = np.random.default_rng(14)
    x = Tensor(rng.normal(size=(3, 4)))
    out = dropout(x, 0.5, rng, training=False)
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_scales_kept_entries():
    rng = np.random.default_rng(15)
    x = Tensor(np.ones((200, 50)))
    out = dropout(x, 0.8, np.random.default_rng(0), training=True)
    kept = out.data[out.data > 0]
    np.testing.assert_allclose(kept, 1.0 / 0.8)
    assert abs(kept.size / out.data.size - 0.8) < 0.02


def test_dropout_rejects_bad_keep_prob():
    x = Tensor(np.ones(3))
    with pytest.raises(ContractViolation):
        dropout(x, 0.0, np.random.default_rng(0), training=True)


def test_masked_mean_pool():
    vals = np.zeros((1, 3, 2))
    vals[0, 0] = [2.0, 4.0]
    vals[0, 1] = [4.0, 8.0]
    vals[0, 2] = [999.0, 999.0]
    x = SequenceBatch(Tensor(vals), np.array([[1.0, 1.0, 0.0]]))
    out = masked_mean_pool(x)
    np.testing.assert_allclose(out.data, [[3.0, 6.0]])


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------

def test_pooling_layers_parameter_free():
    for kind in ("maxpool3", "avgpool3"):
        params, _ = layer_cost(LayerSpec(kind, 64, 60))
        assert params == 0


def test_conv_time_monotone_in_kernel():
    t1 = layer_cost(LayerSpec("conv1", 64, 60))[1]
    t7 = layer_cost(LayerSpec("conv7", 64, 60))[1]
    assert t1 < t7


def test_attention_time_quadratic_in_length():
    h = 64
    ts = {L: layer_cost(LayerSpec("self_attention", h, L))[1] for L in (10, 20, 40)}
    # subtract the linear projection term; the remainder must scale as L^2
    quad = {L: ts[L] - 4 * L * h * h for L in ts}
    assert quad[20] == pytest.approx(4 * quad[10])
    assert quad[40] == pytest.approx(4 * quad[20])


def test_layer_cost_pure():
    a = layer_cost(LayerSpec("bigru", 64, 60))
    b = layer_cost(LayerSpec("bigru", 64, 60))
    assert a == b
