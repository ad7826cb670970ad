"""Finite-difference suites covering every differentiable op and full forwards.

Each suite draws fresh random inputs per seed and returns the worst relative
error between reverse-mode and central-difference gradients.

Op suites use the plain two-point difference at h=1e-5. Block and model suites
redraw every parameter uniformly in [-1, 1] (production init leaves some
gradients near 1e-9, below what any difference quotient resolves in float64)
and use the four-point stencil at h=1e-3: the loss there is O(10-100), so the
two-point quotient at h=1e-5 carries ~1e-9 of round-off, which is too much for
coordinates whose gradient is ~1e-5.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .encoders import ModelConfig
from .fusion import CrossModalModel, Strategy, UnimodalModel, compute_context_alpha
from .module import Module
from .ssm import MambaBlock, SsmBlockConfig, discretize, selective_scan, selective_scan_fused
from .tensor import Tensor, finite_diff_check, param_grad_check

TOLERANCE = 1e-5
STEP = 1e-5
MODEL_STEP = 1e-3
MODEL_STENCIL = 4
MODEL_COORDS = 3  # sampled flat indices per parameter tensor

GRADCHECK_MODEL = ModelConfig(
    variant="gradcheck", depth=1, dim=8, frames=2, height=8, width=8, patch_size=4,
    num_classes=2, d_state=4, expand=2, d_conv=3,
)


@dataclass
class SuiteResult:
    name: str
    max_error: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _rand(rng, *shape, low=-2.0, high=2.0) -> np.ndarray:
    return rng.uniform(low, high, size=shape)


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_all(out * Tensor(w))


def check_inputs(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng, h: float = STEP, stencil: int = 2) -> float:
    """Check ``sum(w * fn(*inputs))`` against each input in turn."""
    probe = fn(*[Tensor(x) for x in inputs])
    w = rng.uniform(-1.0, 1.0, size=probe.shape)
    worst = 0.0
    for i in range(len(inputs)):
        def f(t, i=i):
            args = [Tensor(x) for x in inputs]
            args[i] = t
            return _weighted_sum(fn(*args), w)

        worst = max(worst, finite_diff_check(f, Tensor(inputs[i]), h, stencil=stencil))
    return worst


def randomize(module: Module, rng, low: float = -1.0, high: float = 1.0) -> None:
    for p in module.parameters():
        p.data = np.asarray(rng.uniform(low, high, size=p.shape), dtype=np.float64)


def check_module(loss_fn: Callable[[], Tensor], module: Module, rng, coords: int = MODEL_COORDS) -> float:
    return param_grad_check(loss_fn, module.parameters(), MODEL_STEP, coords_per_param=coords, rng=rng, stencil=MODEL_STENCIL)


# ---------------------------------------------------------------------------
# suites, one seed each


def _matmul(rng):
    return check_inputs(T.matmul, [_rand(rng, 3, 4), _rand(rng, 4, 2)], rng)


def _unary(name):
    return lambda rng: check_inputs(lambda x: T.elementwise(name, x), [_rand(rng, 5)], rng)


def _binary(name):
    return lambda rng: check_inputs(lambda x, y: T.elementwise(name, x, y), [_rand(rng, 5), _rand(rng, 5)], rng)


def _layer_norm(rng):
    return check_inputs(lambda x, g, b: T.layer_norm(x, g, b, 1e-6), [_rand(rng, 4, 8), _rand(rng, 8), _rand(rng, 8)], rng)


def _concat_tokens(rng):
    return check_inputs(T.concat_tokens, [_rand(rng, 2, 3), _rand(rng, 4, 3)], rng)


def _mean_all(rng):
    return check_inputs(lambda x: T.sigmoid(T.mean_all(x)), [_rand(rng, 3, 4)], rng)


def _shape_ops(rng):
    def fn(x):
        y = T.transpose(T.reshape(x, (3, 2, 4)), (2, 0, 1))
        return T.concat([T.flip(T.narrow(y, 0, 1, 3), 1), T.reshape(T.select(y, 0, 3), (1, 3, 2))], axis=0)

    return check_inputs(fn, [_rand(rng, 6, 4)], rng)


def _bias_ops(rng):
    def fn(x, b, s, v):
        return T.scale_rows(T.add_bias(x, b), s) - T.broadcast_leading(v, (4,))

    return check_inputs(fn, [_rand(rng, 4, 3), _rand(rng, 3), _rand(rng, 4), _rand(rng, 3)], rng)


def _reductions(rng):
    def fn(x):
        return T.mean(x, (0, 2)) * T.sum_all(T.exp(x) * 0.1)

    return check_inputs(fn, [_rand(rng, 2, 3, 4)], rng)


def _cross_entropy(rng):
    labels = rng.integers(0, 4, size=5)
    return check_inputs(lambda z: T.cross_entropy(z, labels), [_rand(rng, 5, 4)], rng)


def _conv(rng):
    return check_inputs(T.depthwise_conv1d, [_rand(rng, 2, 6, 3), _rand(rng, 3, 4), _rand(rng, 3)], rng)


def _discretize(rng):
    def fn(delta, a, b):
        a_bar, b_bar = discretize(delta, a, b)
        return T.concat([a_bar, b_bar], axis=-1)

    return check_inputs(fn, [_rand(rng, 5, 3, low=0.1, high=2.0), _rand(rng, 3, 2, low=-2.0, high=-0.1), _rand(rng, 5, 2)], rng)


def _scan(rng):
    length, c, n = 6, 3, 2
    return check_inputs(
        selective_scan,
        [_rand(rng, length, c), _rand(rng, length, c, n, low=0.2, high=1.0), _rand(rng, length, c, n), _rand(rng, length, n), _rand(rng, c)],
        rng,
    )


def _scan_fused(rng):
    b, length, c, n = 2, 5, 3, 2
    return check_inputs(
        selective_scan_fused,
        [
            _rand(rng, b, length, c),
            _rand(rng, b, length, c, low=0.1, high=2.0),
            _rand(rng, c, n, low=-2.0, high=-0.1),
            _rand(rng, b, length, n),
            _rand(rng, b, length, n),
            _rand(rng, c),
        ],
        rng,
    )


def _block(bidirectional):
    def run(rng):
        cfg = SsmBlockConfig(16, d_state=4, bidirectional=bidirectional)
        block = MambaBlock(cfg, rng)
        randomize(block, rng)
        x = _rand(rng, 8, 16)
        w = rng.uniform(-1.0, 1.0, size=(8, 16))
        err = check_inputs(block.forward, [x], rng, MODEL_STEP, MODEL_STENCIL)
        return max(err, check_module(lambda: _weighted_sum(block(Tensor(x)), w), block, rng))

    return run


def _toy_batch(rng, config: ModelConfig, batch: int = 2):
    frames = rng.uniform(0.0, 1.0, size=(batch, config.frames, config.height, config.width, 3))
    keypoints = _rand(rng, batch, config.frames, config.skeleton_features)
    labels = rng.integers(0, config.num_classes, size=batch)
    return frames, keypoints, labels


def context_alpha(model: CrossModalModel, frames: np.ndarray, keypoints: np.ndarray) -> np.ndarray:
    """The per-sample mixing weight a Context-strategy model would use."""
    fusion = model.fusion
    with T.no_grad():
        rows_v = T.add_bias(model.video(Tensor(frames)).rows, fusion.modality_embed_video)
        rows_s = T.add_bias(model.skeleton(Tensor(keypoints)).rows, fusion.modality_embed_skel)
        return compute_context_alpha(rows_v, rows_s, fusion.strategy.context_block).data


def _unsaturated(model, frames, keypoints) -> bool:
    # at a saturated sigmoid the true gradients sit below difference resolution
    if not isinstance(model, CrossModalModel) or model.fusion.strategy.tag is not Strategy.CONTEXT:
        return True
    alpha = context_alpha(model, frames, keypoints)
    return bool(np.all((alpha > 0.01) & (alpha < 0.99)))


def _model_suite(build: Callable[[int], Module]):
    def run(rng):
        while True:
            model = build(int(rng.integers(1 << 30)))
            randomize(model, rng)
            frames, keypoints, _ = _toy_batch(rng, GRADCHECK_MODEL)
            if _unsaturated(model, frames, keypoints):
                break
        # a random readout of the logits; cross-entropy saturates under the redraw
        w = rng.uniform(-1.0, 1.0, size=(len(frames), GRADCHECK_MODEL.num_classes))
        return check_module(lambda: _weighted_sum(model(Tensor(frames), Tensor(keypoints)), w), model, rng)

    return run


SUITES: dict[str, Callable[[np.random.Generator], float]] = {
    "matmul": _matmul,
    "sigmoid": _unary("sigmoid"),
    "softplus": _unary("softplus"),
    "silu": _unary("silu"),
    "exp": _unary("exp"),
    "add": _binary("add"),
    "sub": lambda rng: check_inputs(T.sub, [_rand(rng, 5), _rand(rng, 5)], rng),
    "mul": _binary("mul"),
    "layer_norm": _layer_norm,
    "concat_tokens": _concat_tokens,
    "mean_all": _mean_all,
    "shape_ops": _shape_ops,
    "bias_ops": _bias_ops,
    "reductions": _reductions,
    "cross_entropy": _cross_entropy,
    "depthwise_conv1d": _conv,
    "discretize": _discretize,
    "selective_scan": _scan,
    "selective_scan_fused": _scan_fused,
    "mamba_block": _block(False),
    "mamba_block_bidirectional": _block(True),
    "video_branch": _model_suite(lambda s: UnimodalModel(GRADCHECK_MODEL, "video", s)),
    "skeleton_branch": _model_suite(lambda s: UnimodalModel(GRADCHECK_MODEL, "skeleton", s)),
    "fusion_naive": _model_suite(lambda s: CrossModalModel(GRADCHECK_MODEL, "naive", s)),
    "fusion_average": _model_suite(lambda s: CrossModalModel(GRADCHECK_MODEL, "average", s)),
    "fusion_weighted": _model_suite(lambda s: CrossModalModel(GRADCHECK_MODEL, "weighted", s)),
    "fusion_context": _model_suite(lambda s: CrossModalModel(GRADCHECK_MODEL, "context", s)),
}


def run_suite(name: str, seeds: int = 10) -> SuiteResult:
    fn = SUITES[name]
    t0 = time.perf_counter()
    worst = max(fn(np.random.default_rng([seed, len(name)])) for seed in range(seeds))
    return SuiteResult(name, worst, seeds, time.perf_counter() - t0)


def run_all(seeds: int = 10, names=None) -> list[SuiteResult]:
    return [run_suite(n, seeds) for n in (names or SUITES)]
