"""
Named gradient checks.

Every differentiable operation the model uses has an entry building a
small 64-bit case: a scalar function and the tensors to perturb. The
scalar is a fixed random projection of the operation's output so every
output coordinate contributes.
"""

import logging
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from ohformer.errors import ConfigurationError
from ohformer.nn.attention import ProjectionSet, mhsa
from ohformer.nn.grid import TokenGrid
from ohformer.nn.lrp import Lrp, deform_branch, lrp
from ohformer.nn.oh_layer import MODES, LocalPrior, OhLayer, prior_mix, share_scores
from ohformer.tensor import (
    Module,
    Rng,
    Tensor,
    avg_pool2d,
    batch_norm_1d,
    bilinear_sample,
    concat,
    conv2d,
    exp,
    finite_diff_check,
    float64_mode,
    gelu,
    layer_norm,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    nearest_upsample2d,
    pad2d,
    relu,
    segment_sum,
    softmax_lastdim,
    sqrt,
)
from ohformer.training.losses import batch_hard_triplet, cross_entropy

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4

Case = Tuple[Callable[..., Tensor], List[Tensor]]


def _projected(out: Tensor, rng: Rng) -> Tensor:
    weights = Tensor(rng.normal(size=out.shape))
    return (out * weights).sum()


def _t(rng: Rng, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape))


def _unary(op) -> Callable[[Rng], Case]:
    return lambda rng: _case(op, [_t(rng, 3, 5)], rng)


def _case(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rng: Rng) -> Case:
    state = Rng(rng.seed()).get_state()
    return (lambda *ts: _projected(fn(*ts), Rng.from_state(state))), list(inputs)


def _module_case(fn: Callable[[Tensor], Tensor], x: Tensor, module: Module, rng: Rng) -> Case:
    """``fn`` reads the module's parameters, which are perturbed in place alongside ``x``."""
    return _case(lambda a, *_: fn(a), [x] + module.parameters(), rng)


def _conv(rng: Rng) -> Case:
    return _case(lambda x, w, b: conv2d(x, w, stride=2, padding=1, bias=b),
                 [_t(rng, 2, 3, 5, 4), _t(rng, 4, 3, 3, 3), _t(rng, 4)], rng)


def _depthwise_conv(rng: Rng) -> Case:
    return _case(lambda x, w: conv2d(x, w, stride=2, padding=1, groups=3),
                 [_t(rng, 2, 3, 5, 4), _t(rng, 3, 1, 3, 3)], rng)


def _bilinear(rng: Rng) -> Case:
    coords = Tensor(rng.uniform(-1.3, 4.6, size=(2, 7, 2)))
    return _case(bilinear_sample, [_t(rng, 2, 3, 4, 4), coords], rng)


def _layer_norm(rng: Rng) -> Case:
    return _case(layer_norm, [_t(rng, 2, 3, 6), _t(rng, 6, low=0.5, high=1.5), _t(rng, 6)], rng)


def _batch_norm(rng: Rng) -> Case:
    mean, var = np.zeros(4), np.ones(4)

    def fn(x, g, b):
        return batch_norm_1d(x, g, b, mean.copy(), var.copy(), training=True)

    return _case(fn, [_t(rng, 5, 4), _t(rng, 4, low=0.5, high=1.5), _t(rng, 4)], rng)


def _attention(rng: Rng) -> Case:
    proj = ProjectionSet(8, 2, rng)
    x = _t(rng, 2, 5, 8)
    return _module_case(lambda a: mhsa(a, proj), x, proj, rng)


def _deform_branch(rng: Rng) -> Case:
    p = Lrp(4, rng, "DFC")
    p.offset_weight.data = rng.normal(0.0, 0.05, size=p.offset_weight.shape)
    p.offset_bias.data = rng.uniform(0.1, 0.4, size=p.offset_bias.shape)
    x = _t(rng, 2, 4, 5, 4)
    return _module_case(lambda a: deform_branch(a, p), x, p, rng)


def _lrp(rng: Rng) -> Case:
    p = Lrp(4, rng, "DWC+DFC")
    p.offset_bias.data = rng.uniform(0.1, 0.4, size=p.offset_bias.shape)
    x = _t(rng, 2, 20, 4)
    return _module_case(lambda a: lrp(TokenGrid(a, 5, 4), p).tokens, x, p, rng)


def _prior_mix(axis: str) -> Callable[[Rng], Case]:
    def build(rng: Rng) -> Case:
        return _case(lambda s, w: prior_mix(s, w, axis), [_t(rng, 2, 2, 4, 4), _t(rng, 4, 4)], rng)
    return build


def _share_scores(rng: Rng) -> Case:
    return _case(lambda s: share_scores(s, (4, 2), (2, 1)), [_t(rng, 1, 2, 8, 8)], rng)


def _local_prior(axis: str) -> Callable[[Rng], Case]:
    def build(rng: Rng) -> Case:
        prior = LocalPrior((3, 2))
        prior.taps.data = prior.taps.data + rng.normal(0.0, 0.3, size=prior.taps.shape)
        return _module_case(lambda s: prior_mix(s, prior, axis), _t(rng, 2, 2, 6, 6), prior, rng)
    return build


def _segment_sum(rng: Rng) -> Case:
    segments = np.array([0, 2, 1, 2, 0])
    return _case(lambda a: segment_sum(a, segments, 3, axis=1), [_t(rng, 2, 5, 3)], rng)


def _cross_entropy(rng: Rng) -> Case:
    labels = np.array([0, 2, 1, 2])
    return _case(lambda z: cross_entropy(z, labels), [_t(rng, 4, 3, low=-2.0, high=2.0)], rng)


def _triplet(rng: Rng) -> Case:
    labels = np.array([0, 0, 1, 1, 2, 2])
    return _case(lambda f: batch_hard_triplet(f, labels, 0.3), [_t(rng, 6, 5)], rng)


def _perturb_layer(layer: OhLayer, rng: Rng) -> None:
    for order in layer.orders:
        if "DFC" in order.lrp.kinds:
            order.lrp.offset_weight.data = rng.normal(0.0, 0.05, size=order.lrp.offset_weight.shape)
            order.lrp.offset_bias.data = rng.uniform(0.1, 0.4, size=order.lrp.offset_bias.shape)
        prior = order.prior.taps if isinstance(order.prior, LocalPrior) else order.prior
        if prior is not None:
            prior.data = prior.data + rng.normal(0.0, 0.05, size=prior.shape)


def full_layer_case(rng: Rng, mode: str = "shared") -> Case:
    """A narrow 3-order layer on a 6x3 grid with non-zero offsets (and a perturbed prior in shared mode)."""
    layer = OhLayer(4, 2, (6, 3), rng, order=3, mode=mode, mlp_ratio=2)
    _perturb_layer(layer, rng)
    x = _t(rng, 2, 19, 4)
    return _module_case(lambda a: layer(TokenGrid(a, 6, 3, has_cls=True)).tokens, x, layer, rng)


OPS: Dict[str, Callable[[Rng], Case]] = {
    "add": lambda rng: _case(lambda a, b: a + b, [_t(rng, 3, 4), _t(rng, 4)], rng),
    "mul": lambda rng: _case(lambda a, b: a * b, [_t(rng, 3, 4), _t(rng, 3, 1)], rng),
    "div": lambda rng: _case(lambda a, b: a / b, [_t(rng, 3, 4), _t(rng, 3, 4, low=0.5, high=2.0)], rng),
    "matmul": lambda rng: _case(matmul, [_t(rng, 2, 3, 4), _t(rng, 4, 5)], rng),
    "exp": _unary(exp),
    "log": lambda rng: _case(log, [_t(rng, 3, 4, low=0.5, high=2.0)], rng),
    "sqrt": lambda rng: _case(sqrt, [_t(rng, 3, 4, low=0.5, high=2.0)], rng),
    "gelu": _unary(gelu),
    "relu": _unary(relu),
    "softmax": _unary(softmax_lastdim),
    "log_softmax": _unary(log_softmax),
    "sum": lambda rng: _case(lambda a: a.sum(axis=1), [_t(rng, 3, 4)], rng),
    "mean": lambda rng: _case(lambda a: a.mean(axis=0), [_t(rng, 3, 4)], rng),
    "max": lambda rng: _case(lambda a: a.max(axis=1), [_t(rng, 3, 4)], rng),
    "transpose": lambda rng: _case(lambda a: a.transpose(2, 0, 1), [_t(rng, 2, 3, 4)], rng),
    "index": lambda rng: _case(lambda a: a[:, [0, 2, 2]], [_t(rng, 3, 4)], rng),
    "concat": lambda rng: _case(lambda a, b: concat([a, b], axis=1), [_t(rng, 2, 3), _t(rng, 2, 2)], rng),
    "pad2d": lambda rng: _case(lambda a: pad2d(a, 1), [_t(rng, 1, 2, 3, 3)], rng),
    "conv2d": _conv,
    "depthwise_conv2d": _depthwise_conv,
    "bilinear_sample": _bilinear,
    "avg_pool2d": lambda rng: _case(avg_pool2d, [_t(rng, 1, 2, 5, 4)], rng),
    "max_pool2d": lambda rng: _case(max_pool2d, [_t(rng, 1, 2, 5, 4)], rng),
    "nearest_upsample2d": lambda rng: _case(lambda a: nearest_upsample2d(a, (5, 3)), [_t(rng, 1, 2, 2, 2)], rng),
    "layer_norm": _layer_norm,
    "batch_norm_1d": _batch_norm,
    "attention": _attention,
    "deform_branch": _deform_branch,
    "lrp": _lrp,
    "prior_mix_key": _prior_mix("key"),
    "prior_mix_query": _prior_mix("query"),
    "prior_mix_elementwise": _prior_mix("elementwise"),
    "local_prior_key": _local_prior("key"),
    "local_prior_query": _local_prior("query"),
    "segment_sum": _segment_sum,
    "share_scores": _share_scores,
    "cross_entropy": _cross_entropy,
    "batch_hard_triplet": _triplet,
}


def run_check(name: str, seed: int = 0) -> float:
    """
    Max relative gradient error of one named operation, in 64-bit mode.

    Raises:
        ConfigurationError: unknown operation name
    """
    if name not in OPS:
        raise ConfigurationError(f"unknown gradient check {name!r}; known: {', '.join(sorted(OPS))}")
    with float64_mode():
        fn, inputs = OPS[name](Rng(seed))
        error = finite_diff_check(fn, inputs)
    logger.info("gradcheck %s: max relative error %.3e", name, error)
    return error


def run_full_layer(seed: int = 0, modes: Sequence[str] = MODES) -> float:
    """
    Worst error over a full 3-order layer, by default in both attention modes.

    Raises:
        ConfigurationError: unknown attention mode
    """
    unknown = sorted(set(modes) - set(MODES))
    if unknown:
        raise ConfigurationError(f"unknown attention mode {unknown[0]!r}; expected full or shared")
    worst = 0.0
    with float64_mode():
        for mode in modes:
            fn, inputs = full_layer_case(Rng(seed), mode)
            error = finite_diff_check(fn, inputs)
            logger.info("gradcheck full layer (%s): max relative error %.3e", mode, error)
            worst = max(worst, error)
    return worst
