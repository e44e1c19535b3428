import math

import numpy as np
import pytest

from clipmap.autodiff import Tensor
from clipmap.optim import OptimState, adamw_step, clip_grad_norm, global_grad_norm, lr_at


def test_schedule_shape():
    base, warm, total = 1e-3, 10, 100
    assert lr_at(0, base, warm, total) == 0.0
    assert lr_at(1, base, warm, total) == pytest.approx(base / warm)
    assert lr_at(warm, base, warm, total) == pytest.approx(base)
    assert lr_at(total, base, warm, total) == 0.0
    mid = (warm + total) // 2
    assert lr_at(mid, base, warm, total) == pytest.approx(0.5 * base * (1 + math.cos(math.pi * (mid - warm) / (total - warm))))
    lrs = [lr_at(s, base, warm, total) for s in range(warm, total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(-1, base, warm, total)


def test_adamw_matches_scalar_reference():
    p = Tensor(np.array([[0.5, -1.0]]), requires_grad=True)
    b = Tensor(np.array([0.3]), requires_grad=True)
    state = OptimState()
    ref_p, ref_b = [0.5, -1.0], 0.3
    m = [0.0, 0.0, 0.0]
    v = [0.0, 0.0, 0.0]
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.98, 1e-8, 0.1
    rng = np.random.default_rng(0)
    for t in range(1, 6):
        g = rng.normal(size=3)
        p.grad, b.grad = g[:2].reshape(1, 2), g[2:]
        adamw_step([("w", p), ("b", b)], state, lr, b1, b2, eps, wd, lambda n, t: t.ndim >= 2)
        vals = ref_p + [ref_b]
        for i in range(3):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh, vh = m[i] / (1 - b1 ** t), v[i] / (1 - b2 ** t)
            decay = wd if i < 2 else 0.0
            vals[i] = vals[i] - lr * decay * vals[i] - lr * mh / (math.sqrt(vh) + eps)
        ref_p, ref_b = vals[:2], vals[2]
        np.testing.assert_allclose(p.data[0], ref_p, rtol=1e-14)
        assert b.data[0] == pytest.approx(ref_b, rel=1e-14)
    assert state.step == 5


def test_optim_state_round_trip():
    state = OptimState(step=3)
    state.m["a.b"], state.v["a.b"] = np.ones(2), np.full(2, 2.0)
    back = OptimState.from_state(state.state_dict())
    assert back.step == 3 and np.array_equal(back.m["a.b"], state.m["a.b"])
    assert np.array_equal(back.v["a.b"], state.v["a.b"])


def test_clipping_bounds_global_norm(rng):
    params = [(str(i), Tensor(np.zeros(s), requires_grad=True)) for i, s in enumerate([(3,), (2, 2)])]
    for _, p in params:
        p.grad = rng.normal(scale=10, size=p.shape)
    before = global_grad_norm(params)
    assert clip_grad_norm(params, 5.0) == before
    assert global_grad_norm(params) <= 5.0 + 1e-9
    small = [("x", Tensor(np.zeros(2), requires_grad=True))]
    small[0][1].grad = np.array([0.1, 0.2])
    clip_grad_norm(small, 5.0)
    np.testing.assert_array_equal(small[0][1].grad, [0.1, 0.2])


def test_adamw_worked_examples():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adamw_step([("p", p)], OptimState(), lr=0.1, weight_decay=0.0)
    assert np.array_equal(p.data, [1.5, -2.0])

    q = Tensor(np.array(0.0), requires_grad=True)
    q.grad = np.array(1.0)
    adamw_step([("q", q)], OptimState(), lr=0.1, beta1=0.9, beta2=0.98, eps=1e-8)
    assert float(q.data) == pytest.approx(-0.1, abs=1e-8)

    r = Tensor(np.array([[2.0, -4.0]]), requires_grad=True)
    r.grad = np.zeros((1, 2))
    adamw_step([("r", r)], OptimState(), lr=0.1, weight_decay=0.2)
    np.testing.assert_array_equal(r.data, np.array([[2.0, -4.0]]) * (1 - 0.1 * 0.2))


def test_cosine_endpoint_is_tiny():
    assert lr_at(500, 1e-3, 50, 500) <= 1e-12 * 1e-3
