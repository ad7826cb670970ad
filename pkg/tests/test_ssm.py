import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmamba import tensor as T
from xmamba.errors import ShapeMismatch
from xmamba.ssm import (
    MambaBlock,
    SsmBlockConfig,
    bench_scan,
    discretize,
    mamba_block_forward,
    selective_scan,
    selective_scan_fused,
    selective_scan_reference,
)
from xmamba.tensor import Tensor


def random_scan_inputs(rng, length, channels=3, state=2):
    return (
        rng.normal(size=(length, channels)),
        rng.uniform(0.3, 1.0, size=(length, channels, state)),
        rng.normal(size=(length, channels, state)),
        rng.normal(size=(length, state)),
        rng.normal(size=channels),
    )


def scan_np(*args):
    return selective_scan(*[Tensor(a) for a in args]).data


def test_discretize_examples():
    ln2 = math.log(2)
    a_bar, b_bar = discretize(Tensor([[ln2]]), Tensor([[-1.0]]), Tensor([[1.0]]))
    assert a_bar.data.item() == pytest.approx(0.5, abs=1e-15)
    assert b_bar.data.item() == pytest.approx(0.6931471805599453, abs=1e-15)
    a_bar, _ = discretize(Tensor([[1.0]]), Tensor([[0.0]]), Tensor([[1.0]]))
    assert a_bar.data.item() == 1.0


def test_discretize_shapes():
    a_bar, b_bar = discretize(Tensor(np.ones((5, 3))), Tensor(-np.ones((3, 2))), Tensor(np.ones((5, 2))))
    assert a_bar.shape == b_bar.shape == (5, 3, 2)
    with pytest.raises(ShapeMismatch):
        discretize(Tensor(np.ones((5, 3))), Tensor(-np.ones((4, 2))), Tensor(np.ones((5, 2))))


def test_scan_accumulator_and_skip():
    ones = np.ones((3, 1, 1))
    y = scan_np(np.ones((3, 1)), ones, ones, np.ones((3, 1)), np.zeros(1))
    np.testing.assert_array_equal(y[:, 0], [1.0, 2.0, 3.0])
    u = np.array([[0.5], [-2.0], [3.0]])
    y = scan_np(u, ones, ones, np.zeros((3, 1)), np.ones(1))
    np.testing.assert_array_equal(y, u)


def test_scan_two_step_hand_unroll():
    ln2 = math.log(2)
    a_bar, b_bar = discretize(Tensor([[ln2], [ln2]]), Tensor([[-1.0]]), Tensor([[1.0], [1.0]]))
    y = selective_scan(Tensor([[1.0], [0.0]]), a_bar, b_bar, Tensor([[1.0], [1.0]]), Tensor([0.0])).data
    np.testing.assert_allclose(y[:, 0], [ln2, ln2 / 2], atol=1e-15)
    np.testing.assert_allclose(y[:, 0], [0.69315, 0.34657], atol=5e-6)


def test_scan_shape_mismatch():
    rng = np.random.default_rng(0)
    u, a, b, c, d = random_scan_inputs(rng, 4)
    with pytest.raises(ShapeMismatch):
        scan_np(u, a, b, c[:3], d)
    with pytest.raises(ShapeMismatch):
        scan_np(u, a, b, c, np.ones(5))


@pytest.mark.parametrize("length", [1, 2, 7, 32])
def test_scan_matches_quadratic_oracle(length):
    rng = np.random.default_rng(length)
    args = random_scan_inputs(rng, length)
    assert np.max(np.abs(scan_np(*args) - selective_scan_reference(*args))) < 1e-10


def test_batched_scan_matches_per_sequence():
    rng = np.random.default_rng(1)
    d = rng.normal(size=3)
    seqs = [random_scan_inputs(rng, 6)[:4] for _ in range(3)]
    batched = scan_np(*[np.stack(parts) for parts in zip(*seqs)], d)
    for i, s in enumerate(seqs):
        np.testing.assert_array_equal(batched[i], scan_np(*s, d))


def test_fused_scan_matches_generic():
    rng = np.random.default_rng(2)
    b, length, c, n = 2, 9, 4, 3
    u = rng.normal(size=(b, length, c))
    delta = rng.uniform(0.01, 1.0, size=(b, length, c))
    a = -rng.uniform(0.5, 2.0, size=(c, n))
    bm, cm, dv = rng.normal(size=(b, length, n)), rng.normal(size=(b, length, n)), rng.normal(size=c)
    fused = selective_scan_fused(*[Tensor(v) for v in (u, delta, a, bm, cm, dv)]).data
    for i in range(b):
        a_bar, b_bar = discretize(Tensor(delta[i]), Tensor(a), Tensor(bm[i]))
        generic = selective_scan(Tensor(u[i]), a_bar, b_bar, Tensor(cm[i]), Tensor(dv)).data
        np.testing.assert_allclose(fused[i], generic, rtol=1e-12, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_scan_linear_in_u(length, seed):
    rng = np.random.default_rng(seed)
    u1, a, b, c, d = random_scan_inputs(rng, length)
    u2 = rng.normal(size=u1.shape)
    lhs = scan_np(u1 + u2, a, b, c, d)
    rhs = scan_np(u1, a, b, c, d) + scan_np(u2, a, b, c, d)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 16), st.data())
def test_scan_is_causal(length, data):
    t = data.draw(st.integers(0, length - 1))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    u, a, b, c, d = random_scan_inputs(rng, length)
    base = scan_np(u, a, b, c, d)
    bumped = u.copy()
    bumped[t] += rng.normal(size=u.shape[1])
    np.testing.assert_array_equal(scan_np(bumped, a, b, c, d)[:t], base[:t])


def test_unidirectional_block_is_causal():
    rng = np.random.default_rng(3)
    block = MambaBlock(SsmBlockConfig(8, d_state=4, bidirectional=False), rng)
    x = rng.normal(size=(10, 8))
    base = block(Tensor(x)).data
    x[6] += 1.0
    np.testing.assert_array_equal(block(Tensor(x)).data[:6], base[:6])


def test_zero_output_projection_is_identity():
    rng = np.random.default_rng(4)
    block = MambaBlock(SsmBlockConfig(16), rng, zero_out_proj=True)
    x = rng.normal(size=(8, 16))
    np.testing.assert_array_equal(block(Tensor(x)).data, x)


def test_length_one_directions_agree():
    rng = np.random.default_rng(5)
    uni = MambaBlock(SsmBlockConfig(16, bidirectional=False), rng)
    bi_cfg = SsmBlockConfig(16, bidirectional=True)
    x = Tensor(rng.normal(size=(1, 16)))
    np.testing.assert_allclose(mamba_block_forward(x, uni, bi_cfg).data, uni(x).data, rtol=0, atol=1e-15)


def test_block_batched_equals_unbatched():
    rng = np.random.default_rng(6)
    block = MambaBlock(SsmBlockConfig(8, d_state=4), rng)
    x = rng.normal(size=(3, 5, 8))
    batched = block(Tensor(x)).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], block(Tensor(x[i])).data, rtol=1e-13, atol=1e-14)


def test_block_rejects_wrong_width():
    block = MambaBlock(SsmBlockConfig(8), np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        block(Tensor(np.ones((4, 7))))


def test_block_init_pins():
    cfg = SsmBlockConfig(32, d_state=16)
    block = MambaBlock(cfg, np.random.default_rng(7))
    a = -np.exp(block.a_log.data)
    np.testing.assert_allclose(a[0], -np.arange(1, 17), rtol=1e-14)
    dt = np.logaddexp(0.0, block.dt_bias.data)
    assert dt.min() >= 1e-3 - 1e-15 and dt.max() <= 0.1 + 1e-15
    assert cfg.rank == 2 and cfg.d_inner == 64


@pytest.mark.parametrize("cfg", [SsmBlockConfig(16), SsmBlockConfig(198, d_state=16), SsmBlockConfig(5, d_state=3, expand=3, d_conv=2, dt_rank=4)])
def test_block_closed_form_count(cfg):
    block = MambaBlock(cfg, np.random.default_rng(0))
    assert block.num_parameters() == cfg.num_parameters()


def test_block_gradient_through_whole_block():
    rng = np.random.default_rng(8)
    block = MambaBlock(SsmBlockConfig(16), rng)
    x = rng.uniform(-2, 2, (8, 16))
    w = rng.uniform(-1, 1, (8, 16))
    err = T.finite_diff_check(lambda t: T.sum_all(block(t) * Tensor(w)), Tensor(x), 1e-5)
    assert err < 1e-5


def test_config_validation():
    with pytest.raises(ValueError):
        SsmBlockConfig(0)
    with pytest.raises(ValueError):
        SsmBlockConfig(4, d_state=0)


@pytest.mark.parametrize("kernel", ["fused", "generic"])
def test_bench_scan_shape(kernel):
    out = bench_scan([8, 16], d_model=4, d_state=2, trials=2, kernel=kernel)
    assert list(out) == [8, 16]
    assert all(len(v) == 2 and all(t > 0 for t in v) for v in out.values())
    with pytest.raises(ValueError):
        bench_scan([8], kernel="parallel")


def test_states_kept_only_when_taped():
    rng = np.random.default_rng(9)
    u, a, b, c, d = random_scan_inputs(rng, 5)
    leaf = Tensor(u, requires_grad=True)
    taped = selective_scan(leaf, Tensor(a), Tensor(b), Tensor(c), Tensor(d))
    with T.no_grad():
        plain = selective_scan(leaf, Tensor(a), Tensor(b), Tensor(c), Tensor(d))
    np.testing.assert_array_equal(taped.data, plain.data)
    assert taped.requires_grad and not plain.requires_grad
    T.sum_all(taped).backward()  # reads the kept states
    assert leaf.grad.shape == u.shape and np.isfinite(leaf.grad).all()
