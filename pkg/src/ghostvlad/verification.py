"""Finite-difference verification of every differentiable building block.

Each check compares analytic gradients against central differences in
double precision and reports the maximum relative error. The module
checks (SE block, ghost module, ghost bottleneck) run the real layer
classes with their parameters swapped for the probe tensors, so the
exact production code path is what gets differentiated.
"""

from __future__ import annotations

import numpy as np

from .ghostnet import BottleneckEntry, GhostBottleneck, GhostModule, GhostModuleConfig, SEBlock
from .netvlad import VladParams, vlad_aggregate
from .tensor import BatchNormState, ConvSpec, Tensor, batchnorm2d, conv2d, grad_check
from .training import triplet_loss

#: acceptance threshold for every entry in the suite
GRADCHECK_TOLERANCE = 1e-4


def _tensor_slots(obj, seen=None):
    """(owner, attribute) pairs for every trainable Tensor under ``obj``.

    Walks plain attributes, lists, and tuples; stops at Tensors and
    numpy arrays so buffers and gradients are never treated as slots.
    """
    if seen is None:
        seen = set()
    if id(obj) in seen or isinstance(obj, (Tensor, np.ndarray, str, bytes, int, float, bool, type(None))):
        return
    seen.add(id(obj))
    if isinstance(obj, (list, tuple)):
        for item in obj:
            yield from _tensor_slots(item, seen)
        return
    if not hasattr(obj, "__dict__"):
        return
    for attr, value in vars(obj).items():
        if isinstance(value, Tensor):
            if value.requires_grad:
                yield obj, attr
        else:
            yield from _tensor_slots(value, seen)


def _randomize(module, rng, scale: float = 0.3):
    """Jitter every parameter off its init value.

    Zero-initialized biases and betas are kink magnets: they park ReLU
    pre-activations exactly at 0 (batch statistics make pooled means hit
    beta exactly), where finite differences see half the slope.
    """
    for owner, attr in _tensor_slots(module):
        t = getattr(owner, attr)
        t.data = t.data + rng.normal(size=t.data.shape).astype(t.data.dtype) * scale


def _module_gradcheck(module, forward, x: np.ndarray, eps: float = 1e-4) -> float:
    """grad_check of ``forward`` over the input and every module parameter."""
    slots = list(_tensor_slots(module))
    initial = [getattr(owner, attr) for owner, attr in slots]

    def fn(xt, *weights):
        for (owner, attr), w in zip(slots, weights):
            setattr(owner, attr, w)
        return forward(xt)

    try:
        return grad_check(fn, [x, *initial], eps=eps)
    finally:
        for (owner, attr), t in zip(slots, initial):
            setattr(owner, attr, t)


def check_conv2d(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    spec = ConvSpec(4, 6, kernel=3, stride=2, padding=2, dilation=2, groups=2)
    x = rng.normal(size=(2, 4, 5, 6))
    w = rng.normal(size=spec.weight_shape) * 0.5
    b = rng.normal(size=6)
    return grad_check(lambda xt, wt, bt: conv2d(xt, wt, bt, spec), [x, w, b])


def check_batchnorm(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 2, 3))
    gamma = rng.uniform(0.5, 1.5, size=4)
    beta = rng.normal(size=4)

    def fn(xt, gt, bt):
        state = BatchNormState(
            gamma=gt,
            beta=bt,
            running_mean=np.zeros(4),
            running_var=np.ones(4),
        )
        return batchnorm2d(xt, state, training=True)

    return grad_check(fn, [x, gamma, beta])


def check_se_block(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    block = SEBlock(4, reduction=2, rng=rng, dtype=np.float64)
    _randomize(block, rng)
    x = rng.normal(size=(2, 4, 3, 3))
    return _module_gradcheck(block, lambda xt: block(xt), x)


def check_ghost_module(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    cfg = GhostModuleConfig(3, 6, ratio=2, primary_kernel=1, cheap_kernel=3, dilation=2)
    module = GhostModule(cfg, rng, dtype=np.float64)
    _randomize(module, rng)
    x = rng.normal(size=(2, 3, 4, 5))
    return _module_gradcheck(module, lambda xt: module(xt, training=True), x)


def check_ghost_bottleneck(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    entry = BottleneckEntry(3, 8, 4, stride=2, se=True)
    block = GhostBottleneck(entry, rng, dtype=np.float64)
    _randomize(block, rng)
    x = rng.normal(size=(2, 3, 6, 6))
    return _module_gradcheck(block, lambda xt: block(xt, training=True), x)


def check_vlad(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    fmap = rng.normal(size=(1, 3, 2, 2))

    def fn(ft, ct, wt, bt):
        return vlad_aggregate(ft, VladParams(centers=ct, w=wt, b=bt))

    return grad_check(
        fn,
        [fmap, rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng.normal(size=3)],
    )


def check_triplet_loss(seed: int = 0) -> float:
    # squared distances chosen away from the hinge kink and the min tie
    pos = np.array([0.42, 0.2, 0.57])
    neg = np.array([0.22, 0.9, 0.31, 0.05])
    return grad_check(lambda p, n: triplet_loss(p, n, 0.1), [pos, neg])


#: suite entries in report order
CHECKS = (
    ("conv2d", check_conv2d),
    ("batchnorm", check_batchnorm),
    ("se_block", check_se_block),
    ("ghost_module", check_ghost_module),
    ("ghost_bottleneck", check_ghost_bottleneck),
    ("vlad", check_vlad),
    ("triplet_loss", check_triplet_loss),
)


def gradcheck_suite(seed: int = 0) -> dict:
    """Run every check; returns {name: max relative error}."""
    return {name: fn(seed) for name, fn in CHECKS}
