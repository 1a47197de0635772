"""Central finite-difference gradient checking shared by the test modules."""
import numpy as np

from morphgen.autodiff import Tape, Tensor, ops, shadow_f64


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, arrays, h=1e-4, seed=0):
    """Worst relative error between autodiff and central differences over all inputs.

    The output is contracted with a fixed random tensor so every output element
    contributes to the checked scalar.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with shadow_f64():
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = fn(*leaves)
            weights = rng.standard_normal(out.shape) if out.size > 1 else None
            loss = ops.sum(ops.mul(out, Tensor(weights))) if weights is not None else out
            tape.backward(loss)

        def scalar(values):
            o = fn(*[Tensor(v) for v in values]).data
            return float((o * weights).sum()) if weights is not None else float(o)

        worst = 0.0
        for n, a in enumerate(arrays):
            num = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                plus = [x.copy() for x in arrays]
                minus = [x.copy() for x in arrays]
                plus[n][idx] += h
                minus[n][idx] -= h
                num[idx] = (scalar(plus) - scalar(minus)) / (2 * h)
            worst = max(worst, rel_error(num, leaves[n].grad))
    return worst


def op_cases(rng):
    """One gradcheck case per op kind: (kind, callable, input arrays)."""
    r = lambda *s: rng.standard_normal(s)
    away_from_kink = lambda *s: r(*s) + np.sign(r(*s)) * 0.2
    return [
        ("conv3d", lambda x, w, b: ops.conv3d(x, w, b, stride=2, padding=1), [r(2, 2, 5, 5, 5), r(3, 2, 3, 3, 3), r(3)]),
        ("conv_transpose3d", lambda x, w, b: ops.conv_transpose3d(x, w, b, stride=2, padding=1), [r(2, 2, 3, 3, 3), r(2, 3, 4, 4, 4), r(3)]),
        ("matmul", ops.matmul, [r(2, 3, 4), r(4, 5)]),
        ("add", ops.add, [r(2, 3, 4), r(3, 1)]),
        ("mul", ops.mul, [r(2, 3, 4), r(1, 4)]),
        ("relu", ops.relu, [away_from_kink(3, 4)]),
        ("silu", ops.silu, [r(3, 4)]),
        ("instance_norm", lambda x, w, b: ops.instance_norm(x, w, b), [r(2, 3, 3, 3, 2), r(3), r(3)]),
        ("softmax", lambda x: ops.softmax(x, 1), [r(3, 5)]),
        ("scaled_dot_attention", ops.scaled_dot_attention, [r(2, 5, 3), r(2, 5, 3), r(2, 5, 4)]),
        ("mse", ops.mse, [r(3, 4), r(3, 4)]),
        ("l1", ops.l1, [r(3, 4), r(3, 4) + 0.3]),
        ("hinge_relu", ops.hinge_relu, [1.0 + 3.0 * away_from_kink(3, 4)]),
        ("mean", ops.mean, [r(3, 4)]),
    ]
