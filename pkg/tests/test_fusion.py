import numpy as np
import pytest

from xmamba.encoders import TokenSequence, preset
from xmamba.errors import EmptySequence, ShapeMismatch, WidthMismatch
from xmamba.fusion import (
    CrossModalModel,
    FusionModule,
    FusionStrategy,
    Strategy,
    UnimodalModel,
    build_model,
    closed_form_parameter_count,
    compute_context_alpha,
    count_parameters,
    fusion_forward,
    mix_cls,
)
from xmamba.gradcheck import run_suite
from xmamba.ssm import MambaBlock, SsmBlockConfig, selective_scan_reference
from xmamba.tensor import Tensor

SMALL = preset("toy", depth=1, dim=16, frames=2, height=16, width=16, d_state=4)


def batch(rng, cfg=SMALL, n=2):
    frames = rng.uniform(0, 1, (n, cfg.frames, cfg.height, cfg.width, 3))
    keypoints = rng.uniform(-2, 2, (n, cfg.frames, cfg.skeleton_features))
    return Tensor(frames), Tensor(keypoints)


def strategy(tag, omega=0.0, cfg=SMALL, seed=0):
    return FusionStrategy(tag, cfg, np.random.default_rng(seed), omega=omega)


# ---------------------------------------------------------------------------
# mix_cls


def test_average_example():
    out = mix_cls(strategy("average"), Tensor([1.0, 3.0]), Tensor([3.0, 1.0]))
    np.testing.assert_array_equal(out.data, [2.0, 2.0])


def test_weighted_zero_equals_average():
    rng = np.random.default_rng(1)
    v, s = Tensor(rng.normal(size=16)), Tensor(rng.normal(size=16))
    np.testing.assert_array_equal(mix_cls(strategy("weighted"), v, s).data, mix_cls(strategy("average"), v, s).data)


@pytest.mark.parametrize("omega, target", [(20.0, "video"), (-20.0, "skel")])
def test_weighted_saturation(omega, target):
    rng = np.random.default_rng(2)
    v, s = rng.normal(size=16), rng.normal(size=16)
    out = mix_cls(strategy("weighted", omega), Tensor(v), Tensor(s)).data
    expected = v if target == "video" else s
    assert np.linalg.norm(out - expected) <= 2.1e-9 * np.linalg.norm(v - s)


def test_naive_ignores_branch_cls():
    strat = strategy("naive")
    rng = np.random.default_rng(3)
    a = mix_cls(strat, Tensor(rng.normal(size=16)), Tensor(rng.normal(size=16))).data
    b = mix_cls(strat, Tensor(rng.normal(size=16)), Tensor(rng.normal(size=16))).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, strat.naive_cls.data)


def test_mix_cls_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        mix_cls(strategy("average"), Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_strategy_holds_only_its_parameters():
    names = {tag: [n for n, _ in strategy(tag).named_parameters()] for tag in Strategy}
    assert names[Strategy.NAIVE] == ["naive_cls"]
    assert names[Strategy.AVERAGE] == []
    assert names[Strategy.WEIGHTED] == ["omega"]
    assert all(n.startswith("context_block/") for n in names[Strategy.CONTEXT])


def test_unknown_strategy():
    with pytest.raises(ValueError):
        strategy("max")


# ---------------------------------------------------------------------------
# context alpha


def test_context_alpha_zero_tokens_zero_output_is_half():
    block = MambaBlock(SsmBlockConfig(16, d_state=4), np.random.default_rng(4), zero_out_proj=True)
    alpha = compute_context_alpha(Tensor(np.zeros((5, 16))), Tensor(np.zeros((3, 16))), block)
    assert alpha.item() == 0.5


def test_context_alpha_empty():
    block = MambaBlock(SsmBlockConfig(4, d_state=2), np.random.default_rng(5))
    with pytest.raises(EmptySequence):
        compute_context_alpha(Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))), block)


def test_context_alpha_one_side_empty():
    block = MambaBlock(SsmBlockConfig(4, d_state=2), np.random.default_rng(6))
    alpha = compute_context_alpha(Tensor(np.zeros((0, 4))), Tensor(np.ones((3, 4))), block)
    assert 0.0 < alpha.item() < 1.0


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _block_oracle(x, p, cfg):
    """Independent numpy block forward built on the quadratic scan."""
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    h = (x - mu) / np.sqrt(var + cfg.norm_eps) * p.norm_weight.data + p.norm_bias.data
    v = _silu(h @ p.in_proj.data)

    def path(v):
        length, k = len(v), cfg.d_conv
        w = p.conv_weight.data
        u = np.array([[sum(w[ch, k - 1 - j] * v[t - j, ch] for j in range(k) if t - j >= 0) for ch in range(v.shape[1])] for t in range(length)])
        u = u + p.conv_bias.data
        r, n = cfg.rank, cfg.d_state
        proj = u @ p.x_proj.data
        delta = np.logaddexp(0.0, proj[:, :r] @ p.dt_proj.data + p.dt_bias.data)
        a = -np.exp(p.a_log.data)
        a_bar = np.exp(delta[:, :, None] * a[None])
        b_bar = delta[:, :, None] * proj[:, None, r : r + n]
        return selective_scan_reference(u, a_bar, b_bar, proj[:, r + n :], p.d_skip.data)

    y = path(v)
    if cfg.bidirectional:
        y = (y + path(v[::-1])[::-1]) * 0.5
    return x + (y * _silu(h @ p.gate_proj.data)) @ p.out_proj.data


def test_context_alpha_matches_quadratic_oracle():
    rng = np.random.default_rng(7)
    cfg = SsmBlockConfig(8, d_state=4)
    block = MambaBlock(cfg, rng)
    tv, ts = rng.normal(size=(6, 8)), rng.normal(size=(3, 8))
    alpha = compute_context_alpha(Tensor(tv), Tensor(ts), block).item()
    expected = 1.0 / (1.0 + np.exp(-_block_oracle(np.vstack([tv, ts]), block, cfg).mean()))
    assert abs(alpha - expected) < 1e-10


def test_context_alpha_range():
    rng = np.random.default_rng(8)
    block = MambaBlock(SsmBlockConfig(8, d_state=4), rng)
    for _ in range(5):
        a = compute_context_alpha(Tensor(rng.normal(size=(2, 4, 8)) * 3), Tensor(rng.normal(size=(2, 3, 8))), block).data
        assert a.shape == (2,) and np.all((a > 0) & (a < 1))


# ---------------------------------------------------------------------------
# fusion forward and models


def test_logits_shape_toy():
    cfg = preset("toy", depth=1, dim=16, d_state=4)
    model = CrossModalModel(cfg, "average", seed=0)
    frames, keypoints = batch(np.random.default_rng(9), cfg, n=1)
    assert model(Tensor(frames.data[0]), Tensor(keypoints.data[0])).shape == (4,)
    assert model(frames, keypoints).shape == (1, 4)


@pytest.mark.parametrize("seed", range(10))
def test_weighted_zero_matches_average_end_to_end(seed):
    frames, keypoints = batch(np.random.default_rng(100 + seed))
    avg = CrossModalModel(SMALL, "average", seed)(frames, keypoints).data
    wtd = CrossModalModel(SMALL, "weighted", seed)(frames, keypoints).data
    assert np.max(np.abs(avg - wtd)) <= 1e-12


def test_shared_weights_identical_across_strategies():
    states = {tag: CrossModalModel(SMALL, tag, 3).state_dict() for tag in Strategy}
    shared = [n for n in states[Strategy.AVERAGE]]
    for tag in Strategy:
        for name in shared:
            np.testing.assert_array_equal(states[tag][name], states[Strategy.AVERAGE][name])


def _sequences(rng, width_v=16, width_s=16, lv=4, ls=3):
    return (
        TokenSequence(Tensor(rng.normal(size=(lv + 1, width_v))), 0, "video"),
        TokenSequence(Tensor(rng.normal(size=(ls + 1, width_s))), 0, "skeleton"),
    )


def test_width_mismatch():
    module = FusionModule(SMALL, strategy("average"), np.random.default_rng(0))
    v, s = _sequences(np.random.default_rng(1), width_s=8)
    with pytest.raises(WidthMismatch):
        fusion_forward(v, s, module)


def test_naive_logits_invariant_to_branch_cls():
    rng = np.random.default_rng(10)
    module = FusionModule(SMALL, strategy("naive"), rng)
    v, s = _sequences(rng)
    base = fusion_forward(v, s, module).data
    v.tokens.data[0] += 5.0
    s.tokens.data[0] -= 3.0
    np.testing.assert_array_equal(fusion_forward(v, s, module).data, base)


@pytest.mark.parametrize("split", [3, 5])
def test_modality_embedding_symmetry_only_at_zero(split):
    # the same concatenated rows, attributed to the branches at split 4 or at `split`
    rng = np.random.default_rng(11)
    module = FusionModule(SMALL, strategy("average"), rng)
    cls = rng.normal(size=(2, 16))
    rows = rng.normal(size=(8, 16))

    def run(k):
        v = TokenSequence(Tensor(np.vstack([cls[0], rows[:k]])), 0, "video")
        s = TokenSequence(Tensor(np.vstack([cls[1], rows[k:]])), 0, "skeleton")
        return fusion_forward(v, s, module).data

    module.modality_embed_video.data = np.zeros(16)
    module.modality_embed_skel.data = np.zeros(16)
    np.testing.assert_array_equal(run(4), run(split))
    module.modality_embed_video.data = rng.normal(size=16)
    module.modality_embed_skel.data = rng.normal(size=16)
    assert not np.array_equal(run(4), run(split))


def test_embed_cls_flag_changes_output():
    frames, keypoints = batch(np.random.default_rng(12))
    plain = CrossModalModel(SMALL, "average", 0)
    flagged = CrossModalModel(SMALL, "average", 0, embed_cls=True)
    for m in (plain, flagged):
        m.fusion.modality_embed_video.data = np.linspace(-1.0, 1.0, 16)
    assert not np.array_equal(plain(frames, keypoints).data, flagged(frames, keypoints).data)


def test_unimodal_models():
    frames, keypoints = batch(np.random.default_rng(13))
    for kind in ("video", "skeleton"):
        model = build_model(SMALL, kind, seed=0)
        assert isinstance(model, UnimodalModel)
        assert model(frames, keypoints).shape == (2, 4)
    with pytest.raises(ValueError):
        build_model(SMALL, "audio")


def test_parameter_names_use_fusion_prefix():
    names = [n for n, _ in CrossModalModel(SMALL, "weighted", 0).named_parameters()]
    assert "fusion/strategy/omega" in names
    assert sum(n.startswith("fusion/fusion_block/") for n in names) == 12


# ---------------------------------------------------------------------------
# parameter counts


@pytest.mark.parametrize("tag", list(Strategy))
def test_closed_form_count(tag):
    model = CrossModalModel(SMALL, tag, 0)
    assert count_parameters(model) == closed_form_parameter_count(SMALL, tag)


def test_strategy_deltas():
    counts = {tag: count_parameters(CrossModalModel(SMALL, tag, 0)) for tag in Strategy}
    avg = counts[Strategy.AVERAGE]
    assert counts[Strategy.NAIVE] - avg == SMALL.dim
    assert counts[Strategy.WEIGHTED] - avg == 1
    assert counts[Strategy.CONTEXT] - avg == SMALL.ssm().num_parameters()


@pytest.mark.parametrize("suite", ["fusion_context"])
def test_context_end_to_end_gradient(suite):
    assert run_suite(suite, seeds=1).passed
