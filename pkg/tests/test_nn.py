import math

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, assume, given, settings, strategies as st

from sluadv.nn import (MAGIC, Adam, OptimizerState, adam_step, conv_tokens, dense, dropout, grad_check,
                       load_checkpoint, masked_max_pool, noam_lr, save_checkpoint, softmax_xent)

f64 = torch.float64


def rand(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=f64) * scale


def test_dense_identity_and_gelu_zero():
    x = rand(4)
    assert torch.equal(dense(x, torch.eye(4, dtype=f64), torch.zeros(4, dtype=f64)), x)
    assert dense(torch.zeros(3, dtype=f64), rand(2, 3), torch.zeros(2, dtype=f64), "gelu").abs().max() == 0
    with pytest.raises(ValueError):
        dense(x, rand(2, 3), torch.zeros(2, dtype=f64))


@pytest.mark.parametrize("activation", ["gelu", "relu", "identity"])
def test_dense_gradients(activation):
    x, W, b = rand(3, seed=1), rand(2, 3, seed=2), rand(2, seed=3)
    err = grad_check(lambda p: dense(p[0], p[1], p[2], activation).pow(2).sum(), [x, W, b])
    assert err < 1e-6


def test_conv_single_token_uses_only_centre():
    H, K, b = rand(1, 4), rand(5, 3, 4, seed=1), rand(5, seed=2)
    out = conv_tokens(H, K, b, torch.tensor([True]))
    assert torch.allclose(out[0], torch.relu(K[:, 1, :] @ H[0] + b))


def test_conv_zero_kernel():
    out = conv_tokens(rand(4, 3), torch.zeros(2, 3, 3, dtype=f64), torch.zeros(2, dtype=f64), torch.ones(4, dtype=bool))
    assert out.abs().max() == 0


def test_conv_matches_loop():
    H, K, b = rand(5, 3), rand(4, 3, 3, seed=1), rand(4, seed=2)
    mask = torch.tensor([True, True, True, False, False])
    out = conv_tokens(H, K, b, mask)
    for t in range(5):
        acc = b.clone()
        for k, s in enumerate((t - 1, t, t + 1)):
            if 0 <= s < 5 and mask[s]:
                acc = acc + K[:, k, :] @ H[s]
        expected = torch.relu(acc) if mask[t] else torch.zeros(4, dtype=f64)
        assert torch.allclose(out[t], expected)


def test_conv_gradients():
    H, K, b = rand(4, 3), rand(2, 3, 3, seed=1), rand(2, seed=2)
    mask = torch.tensor([True, True, True, False])
    w = rand(4, 2, seed=5)
    assert grad_check(lambda p: (conv_tokens(p[0], p[1], p[2], mask) * w).sum(), [H, K, b]) < 1e-6


def test_max_pool_examples():
    H = torch.tensor([[1.0, 5.0], [3.0, 2.0]], dtype=f64)
    assert masked_max_pool(H, torch.tensor([True, True])).tolist() == [3.0, 5.0]
    assert masked_max_pool(H, torch.tensor([True, False])).tolist() == [1.0, 5.0]
    assert torch.equal(masked_max_pool(H[:1], torch.tensor([True])), H[0])
    with pytest.raises(ValueError):
        masked_max_pool(H, torch.tensor([False, False]))


def test_max_pool_tie_gradient_to_first():
    H = torch.tensor([[2.0], [2.0], [1.0]], dtype=f64, requires_grad=True)
    masked_max_pool(H, torch.ones(3, dtype=bool)).sum().backward()
    assert H.grad[:, 0].tolist() == [1.0, 0.0, 0.0]


def test_max_pool_gradients():
    H = rand(5, 4)
    mask = torch.tensor([True, True, True, True, False])
    assert grad_check(lambda p: (masked_max_pool(p[0], mask) * torch.arange(1, 5, dtype=f64)).sum(), [H]) < 1e-6


def test_softmax_examples():
    p, loss = softmax_xent(torch.zeros(2, dtype=f64), 0)
    assert p.tolist() == [0.5, 0.5] and loss.item() == pytest.approx(math.log(2), abs=1e-12)
    p, loss = softmax_xent(torch.tensor([1000.0, 0.0], dtype=f64), 1)
    assert torch.isfinite(p).all() and p[0].item() == pytest.approx(1.0)
    p, loss = softmax_xent(torch.tensor([math.log(2), 0.0], dtype=f64), 0)
    assert p.tolist() == pytest.approx([2 / 3, 1 / 3], abs=1e-12)
    assert loss.item() == pytest.approx(math.log(1.5), abs=1e-12)
    with pytest.raises(ValueError):
        softmax_xent(torch.zeros(3, dtype=f64), 3)
    with pytest.raises(ValueError):
        softmax_xent(torch.zeros(1, dtype=f64), 0)


def test_softmax_gradients():
    logits = rand(5)
    assert grad_check(lambda p: softmax_xent(p[0], 2)[1], [logits]) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8))
def test_softmax_normalised_and_finite(values):
    p, loss = softmax_xent(torch.tensor(values, dtype=f64), 0)
    assert abs(p.sum().item() - 1) < 1e-9
    assert torch.isfinite(p).all() and torch.isfinite(loss)
    assert (p >= 0).all()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_strictly_positive(values):
    p, _ = softmax_xent(torch.tensor(values, dtype=f64), 0)
    assert (p > 0).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31), st.floats(1, 1e3))
def test_ops_finite_on_large_inputs(T, seed, scale):
    H = rand(T, 3, seed=seed, scale=scale)
    mask = torch.ones(T, dtype=bool)
    out = conv_tokens(H, rand(2, 3, 3, seed=seed + 1, scale=scale), rand(2, seed=seed + 2), mask)
    assert torch.isfinite(out).all()
    assert torch.isfinite(masked_max_pool(out, mask)).all()
    assert torch.isfinite(dense(H, rand(4, 3, seed=seed), rand(4), "gelu")).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2 ** 31))
def test_masked_positions_never_read(T, seed):
    n_valid = 1 + seed % (T - 1)
    mask = torch.arange(T) < n_valid
    H = rand(T, 3, seed=seed)
    H2 = H.clone()
    H2[~mask] = rand(int((~mask).sum()), 3, seed=seed + 1, scale=100.0)
    K, b = rand(2, 3, 3, seed=seed + 2), rand(2, seed=seed + 3)
    assert torch.equal(conv_tokens(H, K, b, mask), conv_tokens(H2, K, b, mask))
    assert torch.equal(masked_max_pool(H, mask), masked_max_pool(H2, mask))


@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.filter_too_much])
@given(st.integers(0, 2 ** 31))
def test_random_shapes_grad_check(seed):
    rng = np.random.default_rng(seed)
    T, d_in, d_out = (int(x) for x in rng.integers(1, 4, size=3))
    H, K, b = rand(T, d_in, seed=seed), rand(d_out, 3, d_in, seed=seed + 1), rand(d_out, seed=seed + 2)
    mask = torch.ones(T, dtype=bool)
    W, c = rand(2, d_out, seed=seed + 3, scale=0.5), rand(2, seed=seed + 4)
    # finite differences are meaningless across ReLU and max kinks
    padded = torch.nn.functional.pad(H, (0, 0, 1, 1))
    pre = sum(padded[k:k + T] @ K[:, k, :].T for k in range(3)) + b
    assume(pre.abs().min() > 1e-3)
    top2 = (torch.relu(pre) + 0.5).sort(dim=0, descending=True).values
    assume(T == 1 or (top2[0] - top2[1]).min() > 1e-3)

    def loss(p):
        pooled = masked_max_pool(conv_tokens(p[0], p[1], p[2], mask) + 0.5, mask)
        # saturating heads would leave gradients below rounding noise
        return (dense(pooled, p[3], p[4]) * torch.tensor([1.0, -2.0], dtype=f64)).sum()

    assert grad_check(loss, [H, K, b, W, c], eps=1e-5) < 1e-6


def test_dropout_inverted_scaling():
    torch.manual_seed(0)
    x = torch.ones(100000, dtype=f64)
    y = dropout(x, 0.5, train=True)
    assert set(torch.unique(y).tolist()) <= {0.0, 2.0}
    assert y.mean().item() == pytest.approx(1.0, abs=0.02)
    assert torch.equal(dropout(x, 0.5, train=False), x)


def test_adam_zero_gradient_and_gating():
    p = {"a": torch.tensor([1.0, 2.0], dtype=f64), "b": torch.tensor([3.0], dtype=f64)}
    state = OptimizerState()
    adam_step(p, {"a": torch.zeros(2, dtype=f64), "b": torch.ones(1, dtype=f64)}, state, 0.1,
              trainable=lambda n: n != "b")
    assert p["a"].tolist() == [1.0, 2.0]
    assert p["b"].tolist() == [3.0]
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    p = {"w": torch.tensor([0.5], dtype=f64)}
    adam_step(p, {"w": torch.tensor([1.0], dtype=f64)}, OptimizerState(), 0.1)
    assert p["w"].item() == pytest.approx(0.5 - 0.1, abs=1e-7)


def test_adam_matches_reference_formula():
    # hand-unrolled Adam for three steps on one scalar
    g_seq = [0.3, -1.2, 0.7]
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(g_seq, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=f64))
    opt = Adam([("w", p)])
    for g in g_seq:
        p.grad = torch.tensor([g], dtype=f64)
        opt.step(0.01)
    assert p.item() == pytest.approx(w, abs=1e-12)


def test_noam():
    assert noam_lr(400, 128, 400, 0.1) == pytest.approx(4.419e-4, rel=1e-3)
    assert noam_lr(400, 128, 400, 0.1) == pytest.approx(0.1 * 128 ** -0.5 * 400 ** -0.5)
    lrs = [noam_lr(s, 128, 50, 1.0) for s in range(1, 200)]
    assert all(a < b for a, b in zip(lrs[:49], lrs[1:50]))
    assert all(a > b for a, b in zip(lrs[49:], lrs[50:]))
    with pytest.raises(ValueError):
        noam_lr(0, 128, 400, 0.1)


def test_grad_check_closed_forms():
    theta = torch.tensor([3.0], dtype=f64)
    assert grad_check(lambda p: 0.5 * p[0].pow(2).sum(), [theta]) < 1e-8
    theta = torch.tensor([3.0, -1.0], dtype=f64)
    assert grad_check(lambda p: p[0].sum() * 0 + 7.0, [theta]) == 0.0


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x.pow(2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    assert grad_check(lambda p: Wrong.apply(p[0]), [rand(3)]) > 0.1


def test_checkpoint_round_trip(tmp_path):
    groups = {"enc": {"enc.w": rand(2, 3), "enc.b": rand(3)}, "head": {"head.s": torch.tensor(2.5, dtype=f64)}}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, groups, seed=42, step=17, meta={"variant": "x"})
    assert path.read_bytes().startswith(MAGIC)
    loaded, seed, step, meta = load_checkpoint(path)
    assert (seed, step, meta) == (42, 17, {"variant": "x"})
    for g, tensors in groups.items():
        for n, t in tensors.items():
            assert torch.equal(loaded[g][n], t)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(path)
