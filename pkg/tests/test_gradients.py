"""Central finite-difference validation of every differentiable operator.

Each operator is checked on >= 20 randomized small shapes at float64 with
step 1e-4; analytic gradients must agree with central differences to a
relative error below 1e-4.  The builders live at module level so the
acceptance gate can re-run the identical sweep.
"""

import numpy as np
import pytest

from dodnet import ops
from dodnet.tensor import Tape, Tensor, backward

from oracles import finite_difference_grads

STEP = 1e-4
TOL = 1e-4
N_CASES = 20


def check_gradients(build, seed):
    """`build(rng)` returns (list of float64 leaf arrays, fn(tensors) -> Tensor)."""
    rng = np.random.default_rng(seed)
    arrays, fn = build(rng)
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    proj_holder = {}

    def forward_scalar():
        for t, a in zip(tensors, arrays):
            t.data = a
        out = fn(tensors)
        if "r" not in proj_holder:
            proj_holder["r"] = np.random.default_rng(seed + 999).normal(size=out.shape)
        return float((out.data * proj_holder["r"]).sum())

    forward_scalar()  # fixes the projection
    proj = Tensor(proj_holder["r"], dtype=np.float64)
    with Tape():
        loss = (fn(tensors) * proj).sum()
        backward(loss)
    numeric = finite_difference_grads(forward_scalar, arrays, step=STEP)
    for t, num in zip(tensors, numeric):
        analytic = t.grad if t.grad is not None else np.zeros_like(num)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(num)))
        rel = np.abs(analytic - num) / denom
        assert rel.max() < TOL, f"gradient mismatch: max rel err {rel.max():.3e}"


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def build_conv3d(rng):
    cin = int(rng.integers(1, 3))
    cout = int(rng.integers(1, 3))
    kernel = tuple(int(rng.integers(1, 4)) for _ in range(3))
    stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
    padding = tuple(int(rng.integers(0, 2)) for _ in range(3))
    spatial = tuple(
        max(int(rng.integers(2, 6)), k - 2 * p) for k, p in zip(kernel, padding)
    )
    x = rng.normal(size=(1, cin) + spatial)
    w = rng.normal(size=(cout, cin) + kernel)
    b = rng.normal(size=cout)
    return [x, w, b], lambda ts: ops.conv3d(ts[0], ts[1], ts[2], stride, padding)


def build_group_norm(rng):
    groups = int(rng.integers(1, 4))
    c = groups * int(rng.integers(1, 4))
    x = rng.normal(size=(int(rng.integers(1, 3)), c, 2, 3, 2))
    gamma = rng.normal(size=c)
    beta = rng.normal(size=c)
    return [x, gamma, beta], lambda ts: ops.group_norm(ts[0], groups, ts[1], ts[2])


def build_weight_standardize(rng):
    w = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 3)), 2, 2, 2))
    return [w], lambda ts: ops.weight_standardize(ts[0])


def build_upsample_trilinear(rng):
    shape = (1, int(rng.integers(1, 3))) + tuple(int(rng.integers(1, 4)) for _ in range(3))
    return [rng.normal(size=shape)], lambda ts: ops.upsample_trilinear(ts[0])


def build_global_avg_pool(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4))) + tuple(
        int(rng.integers(1, 4)) for _ in range(3)
    )
    return [rng.normal(size=shape)], lambda ts: ops.global_avg_pool(ts[0])


def build_relu(rng):
    x = _away_from_zero(rng, (int(rng.integers(2, 5)), int(rng.integers(2, 5))))
    return [x], lambda ts: ops.relu(ts[0])


def build_sigmoid(rng):
    x = rng.normal(size=tuple(int(rng.integers(1, 5)) for _ in range(3)))
    return [x], lambda ts: ops.sigmoid(ts[0])


def build_concat(rng):
    axis = int(rng.integers(0, 2))
    base = [int(rng.integers(1, 4)), int(rng.integers(1, 4))]
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        shape = list(base)
        shape[axis] = int(rng.integers(1, 4))
        parts.append(rng.normal(size=tuple(shape)))
    return parts, lambda ts: ops.concat(ts, axis=axis)


def build_add(rng):
    shape = tuple(int(rng.integers(1, 5)) for _ in range(2))
    return [rng.normal(size=shape), rng.normal(size=shape)], lambda ts: ts[0] + ts[1]


def build_linear(rng):
    n, f, o = (int(rng.integers(1, 5)) for _ in range(3))
    return (
        [rng.normal(size=(n, f)), rng.normal(size=(o, f)), rng.normal(size=o)],
        lambda ts: ops.linear(ts[0], ts[1], ts[2]),
    )


def build_batched_pointwise_conv(rng):
    n = int(rng.integers(1, 3))
    cin = int(rng.integers(1, 4))
    cout = int(rng.integers(1, 4))
    spatial = tuple(int(rng.integers(1, 4)) for _ in range(3))
    return (
        [
            rng.normal(size=(n, cin) + spatial),
            rng.normal(size=(n, cout, cin)),
            rng.normal(size=(n, cout)),
        ],
        lambda ts: ops.batched_pointwise_conv3d(ts[0], ts[1], ts[2]),
    )


def build_elementwise_and_reduction(rng):
    """mul, div, scalar arithmetic, log, clamp, mean, sum, reshape, getitem."""
    shape = (2, int(rng.integers(2, 5)))
    a = _away_from_zero(rng, shape)
    b = _away_from_zero(rng, shape, low=0.4, high=2.0)
    c = rng.uniform(0.3, 0.7, size=shape)

    def fn(ts):
        ta, tb, tc = ts
        prod = ta * tb
        ratio = prod / tb
        mixed = 2.0 * ratio + (1.0 - ta) + ops.log(ops.clamp(tc, 1e-3, 1.0 - 1e-3))
        sliced = mixed[:, 1:]
        flat = sliced.reshape(sliced.size)
        parts = ops.concat([flat.mean().reshape(1), flat.sum().reshape(1)], axis=0)
        return parts

    return [a, b, c], fn


GRADIENT_CASES = [
    ("conv3d", build_conv3d),
    ("group_norm", build_group_norm),
    ("weight_standardize", build_weight_standardize),
    ("upsample_trilinear", build_upsample_trilinear),
    ("global_avg_pool", build_global_avg_pool),
    ("relu", build_relu),
    ("sigmoid", build_sigmoid),
    ("concat", build_concat),
    ("add", build_add),
    ("linear", build_linear),
    ("batched_pointwise_conv3d", build_batched_pointwise_conv),
    ("elementwise_and_reduction", build_elementwise_and_reduction),
]


@pytest.mark.parametrize("seed", range(N_CASES))
@pytest.mark.parametrize("name,build", GRADIENT_CASES, ids=[n for n, _ in GRADIENT_CASES])
def test_operator_gradients(name, build, seed):
    check_gradients(build, seed)
