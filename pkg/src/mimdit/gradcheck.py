"""Finite-difference verification of reverse-mode gradients.

Central differences with step 1e-5 against analytic gradients, reported as
a relative error with a small floor so legitimately-zero gradients compare
cleanly. Checks mutate leaf tensor data in place between fresh graph
evaluations and restore it afterwards.
"""

import numpy as np

from .errors import ParameterError

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
# Below this scale the comparison is absolute: central differences of an O(1)
# float64 loss carry rounding noise ~ulp(loss)/(2*step) ~ 1e-10, so coordinates
# with near-zero gradients cannot meet a pure relative bound. The floor holds
# them to |fd - analytic| <= floor * tolerance = 1e-7, far above that noise.
_REL_FLOOR = 1e-3
CHECK_COORDS_PER_TENSOR = 2


def relative_error(a, b, floor=_REL_FLOOR):
    return abs(a - b) / max(abs(a), abs(b), floor)


def central_difference(fn, target, coord, eps=FD_STEP):
    """d fn() / d target.data.flat[coord] by central differences."""
    flat = target.data.reshape(-1)
    original = flat[coord]
    flat[coord] = original + eps
    plus = fn().item()
    flat[coord] = original - eps
    minus = fn().item()
    flat[coord] = original
    return (plus - minus) / (2.0 * eps)


def max_relative_error(fn, wrt, coords_per_tensor=None, rng=None, eps=FD_STEP):
    """Worst relative error between analytic and finite-difference gradients.

    fn: nullary callable building a fresh scalar-loss graph over the `wrt`
    tensors. When coords_per_tensor is None every coordinate is checked;
    otherwise that many coordinates are sampled per tensor (rng required),
    which keeps full-model checks inside their runtime budget while still
    touching every parameter tensor.
    """
    if coords_per_tensor is not None and rng is None:
        raise ParameterError("coordinate sampling requires an rng")
    for t in wrt:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in wrt]

    worst = 0.0
    for t, grad in zip(wrt, analytic):
        size = t.size
        if coords_per_tensor is None or coords_per_tensor >= size:
            coords = range(size)
        else:
            coords = sorted(int(c) for c in rng.choice(size, size=coords_per_tensor, replace=False))
        for coord in coords:
            fd = central_difference(fn, t, coord, eps=eps)
            an = 0.0 if grad is None else float(grad.reshape(-1)[coord])
            worst = max(worst, relative_error(fd, an))
    return worst


def default_check_config():
    """Small but structurally complete model used by the end-to-end check."""
    from .routing import MiMConfig

    return MiMConfig(
        model_dim=8,
        block_count=2,
        sub_expert_count=2,
        top_k=1,
        window=2,
        heads=1,
        se_reduction=4,
        patch=2,
        image_height=4,
        image_width=4,
        channels=1,
        text_tokens=2,
    )


def backbone_gradient_check(seed, coords_per_tensor=CHECK_COORDS_PER_TENSOR, config=None, eps=FD_STEP):
    """Worst FD-vs-analytic relative error over sampled coordinates of every parameter.

    The instance is fully randomized: every parameter is jittered off its
    initialization. The zero-init state is a measure-zero singular point --
    routing logits tie exactly on the top-k boundary, and the zeroed
    conditioning tokens put layernorm at its eps-regularized kink -- where a
    fixed finite-difference step measures curvature instead of the gradient
    (the analytic gradient is still exact there; FD at smaller steps
    converges to it).
    """
    from . import tensor as T
    from .attention import TokenSequence
    from .backbone import MiMDiT

    if config is None:
        config = default_check_config()
    model = MiMDiT(config, np.random.default_rng([int(seed), 0]), router_init="random")
    jitter = np.random.default_rng([int(seed), 3])
    for p in model.parameters():
        p.data += jitter.normal(0.0, 0.05, size=p.data.shape)
    data_rng = np.random.default_rng([int(seed), 1])
    shape = (config.token_count, config.latent_dim)
    x_t = data_rng.standard_normal(shape)
    z_lq = TokenSequence(
        T.Tensor(data_rng.standard_normal(shape)), config.grid_height, config.grid_width
    )
    target = T.Tensor(data_rng.standard_normal(shape))
    t = float(data_rng.uniform(0.05, 0.95))

    def fn():
        diff = model.velocity(z_lq, T.Tensor(x_t), t) - target
        return T.tensor_mean(diff * diff)

    coord_rng = np.random.default_rng([int(seed), 2])
    return max_relative_error(
        fn, model.parameters(), coords_per_tensor=coords_per_tensor, rng=coord_rng, eps=eps
    )
