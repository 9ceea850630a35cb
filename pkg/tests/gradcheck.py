"""Central finite-difference gradient checking for kernel ops.

Checks run in float64: the directional derivative of a scalarized op
is compared against the autodiff gradient at relative tolerance 1e-3
with step 1e-3.  Case generators keep inputs away from relu-style
kinks so the difference quotient is meaningful.
"""

from __future__ import annotations

import numpy as np

from detector_guidance import kernel as K

STEP = 1e-3
REL_TOL = 1e-3


def scalarize(op_out, weights):
    return K.tensor_sum(K.mul(op_out, K.Tensor(weights)))


def directional_check(fn, arrays, rng, h=STEP, rel_tol=REL_TOL):
    """Assert the FD directional derivative matches backward()."""
    tensors = [K.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward()
    dirs = [rng.standard_normal(a.shape) for a in arrays]
    norm = np.sqrt(sum((d * d).sum() for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(
        float((t.grad * d).sum()) for t, d in zip(tensors, dirs) if t.grad is not None
    )
    plus = fn(*[K.Tensor(a + h * d) for a, d in zip(arrays, dirs)]).item()
    minus = fn(*[K.Tensor(a - h * d) for a, d in zip(arrays, dirs)]).item()
    fd = (plus - minus) / (2 * h)
    denom = max(abs(fd), abs(analytic), 1e-8)
    assert abs(fd - analytic) <= rel_tol * denom, (
        f"directional derivative {fd} vs analytic {analytic} (rel err "
        f"{abs(fd - analytic) / denom:.2e})"
    )


def _away_from_zero(x, margin=5e-2):
    return x + np.sign(x) * margin


def _case_elementwise(op, n_args, transform=None):
    def gen(rng):
        shape = tuple(rng.integers(2, 5, size=int(rng.integers(1, 4))))
        arrays = [rng.standard_normal(shape) for _ in range(n_args)]
        if transform is not None:
            arrays = [transform(a) for a in arrays]
        w = rng.standard_normal(shape)
        return lambda *ts: scalarize(op(*ts), w), arrays

    return gen


def _case_scale(rng):
    shape = (3, 4)
    c = float(rng.uniform(-2, 2))
    w = rng.standard_normal(shape)
    return lambda t: scalarize(K.scale(t, c), w), [rng.standard_normal(shape)]


def _case_shift(rng):
    shape = (4, 3)
    c = float(rng.uniform(-2, 2))
    w = rng.standard_normal(shape)
    return lambda t: scalarize(K.shift(t, c), w), [rng.standard_normal(shape)]


def _case_matmul(rng):
    m, k, n = rng.integers(2, 6, size=3)
    w = rng.standard_normal((m, n))
    return (
        lambda a, b: scalarize(K.matmul(a, b), w),
        [rng.standard_normal((m, k)), rng.standard_normal((k, n))],
    )


def _case_transpose(rng):
    m, n = rng.integers(2, 6, size=2)
    w = rng.standard_normal((n, m))
    return lambda a: scalarize(K.transpose(a), w), [rng.standard_normal((m, n))]


def _case_reshape(rng):
    w = rng.standard_normal(12)
    return lambda a: scalarize(K.reshape(a, (12,)), w), [rng.standard_normal((3, 4))]


def _case_narrow(rng):
    shape = (5, 4)
    axis = int(rng.integers(0, 2))
    length = int(rng.integers(1, shape[axis]))
    start = int(rng.integers(0, shape[axis] - length + 1))
    out_shape = tuple(length if d == axis else shape[d] for d in range(2))
    w = rng.standard_normal(out_shape)
    return (
        lambda a: scalarize(K.narrow(a, axis, start, length), w),
        [rng.standard_normal(shape)],
    )


def _case_softmax(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 6)))
    w = rng.standard_normal(shape)
    return lambda a: scalarize(K.softmax(a, axis=-1), w), [rng.standard_normal(shape)]


def _case_sum(rng):
    shape = (3, 2, 4)
    return lambda a: K.tensor_sum(a), [rng.standard_normal(shape)]


def _case_mean(rng):
    shape = (6, 2)
    return lambda a: K.tensor_mean(a), [rng.standard_normal(shape)]


def _case_avg_pool(rng):
    shape = (2, 4, 6)
    w = rng.standard_normal((2, 2, 3))
    return lambda a: scalarize(K.avg_pool2d(a, 2), w), [rng.standard_normal(shape)]


def _case_conv2d(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h = int(rng.integers(5, 9))
    x = rng.standard_normal((cin, h, h))
    w = rng.standard_normal((cout, cin, 3, 3))
    b = rng.standard_normal(cout)
    oh = K.conv_output_size(h, 3, stride, padding)
    wt = rng.standard_normal((cout, oh, oh))
    return (
        lambda xt, wt_, bt: scalarize(K.conv2d(xt, wt_, bt, stride, padding), wt),
        [x, w, b],
    )


def _case_add_bias(rng):
    shape = (2, 3, 4, 4)
    w = rng.standard_normal(shape)
    return (
        lambda x, b: scalarize(K.add_bias(x, b), w),
        [rng.standard_normal(shape), rng.standard_normal(shape[1])],
    )


def _case_attention(rng):
    p, n, d, dv = 5, 4, 3, 2
    w = rng.standard_normal((p, dv))
    return (
        lambda k, q, v: scalarize(K.attention(k, q, v)[0], w),
        [rng.standard_normal((p, d)), rng.standard_normal((n, d)), rng.standard_normal((n, dv))],
    )


OP_CASES = {
    "add": _case_elementwise(K.add, 2),
    "sub": _case_elementwise(K.sub, 2),
    "mul": _case_elementwise(K.mul, 2),
    "neg": _case_elementwise(K.neg, 1),
    "scale": _case_scale,
    "shift": _case_shift,
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
    "narrow": _case_narrow,
    "relu": _case_elementwise(K.relu, 1, transform=_away_from_zero),
    "sigmoid": _case_elementwise(K.sigmoid, 1),
    "softplus": _case_elementwise(K.softplus, 1),
    "softmax": _case_softmax,
    "sum": _case_sum,
    "mean": _case_mean,
    "avg_pool2d": _case_avg_pool,
    "conv2d": _case_conv2d,
    "add_bias": _case_add_bias,
    "attention": _case_attention,
}


def run_op_sweep(cases_per_op=100, base_seed=0):
    """Run the directional check for every op; returns checked op names."""
    for name, gen in sorted(OP_CASES.items()):
        for i in range(cases_per_op):
            rng = np.random.default_rng((base_seed, hash(name) & 0xFFFF, i))
            fn, arrays = gen(rng)
            directional_check(fn, arrays, rng)
    return sorted(OP_CASES)
