import math

import numpy as np
import pytest

from clipmap.autodiff import Tensor, backward
from clipmap.errors import ContractError
from clipmap.losses import LossWeights, clip_task_loss, distill_loss, mean_row_entropy, total_loss


def hard_ce(logits):
    """Mean cross-entropy against diagonal labels, row by row."""
    out = 0.0
    for i, row in enumerate(logits):
        m = row.max()
        out += -(row[i] - m - math.log(sum(math.exp(v - m) for v in row)))
    return out / len(logits)


def test_task_loss_matches_hard_label_ce(rng):
    z = rng.normal(scale=3, size=(6, 6))
    assert abs(float(clip_task_loss(z, z.T).data) - (hard_ce(z) + hard_ce(z.T))) < 1e-12


@pytest.mark.parametrize("b", [1, 2, 7, 64])
def test_task_loss_on_uniform_logits(b):
    z = np.full((b, b), 3.7)
    assert abs(float(clip_task_loss(z, z).data) - 2 * math.log(b)) <= 1e-9


def test_task_loss_needs_square_logits():
    with pytest.raises(ContractError):
        clip_task_loss(np.zeros((2, 3)), np.zeros((3, 2)))


def test_distill_at_teacher_equals_entropy(rng):
    t = rng.normal(scale=2, size=(8, 8))
    got = float(distill_loss((t, t.T), (t, t.T)).data)
    assert abs(got - (mean_row_entropy(t) + mean_row_entropy(t.T))) <= 1e-9


def test_distill_is_minimised_at_teacher(rng):
    t = rng.normal(size=(5, 5))
    s = Tensor(t.copy(), requires_grad=True)
    backward(distill_loss((s, s.T), (t, t.T)))
    assert np.max(np.abs(s.grad)) < 1e-12
    base = float(distill_loss((t, t.T), (t, t.T)).data)
    for _ in range(5):
        z = t + rng.normal(scale=0.1, size=t.shape)
        assert float(distill_loss((z, z.T), (t, t.T)).data) > base


def test_endpoints_are_bit_exact(rng):
    task, soft = Tensor(rng.normal()), Tensor(rng.normal())
    assert total_loss(task, soft, LossWeights(0.0)).data == task.data
    assert total_loss(task, soft, LossWeights(1.0)).data == soft.data
    mid = total_loss(task, soft, LossWeights(0.25))
    assert abs(float(mid.data) - (0.75 * float(task.data) + 0.25 * float(soft.data))) < 1e-15


def test_lambda_range_and_default():
    assert LossWeights().lam == 1.0
    for bad in (-0.1, 1.5):
        with pytest.raises(ContractError):
            LossWeights(bad)


def test_task_loss_worked_examples():
    eye = 100.0 * np.eye(4)
    assert float(clip_task_loss(eye, eye).data) <= 1e-10
    two = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert float(clip_task_loss(two, two.T).data) == pytest.approx(2 * math.log(1 + math.exp(-1)), abs=1e-12)
    assert 2 * math.log(1 + math.exp(-1)) == pytest.approx(0.6265, abs=1e-4)


def test_distill_saturated_teacher_uniform_student():
    b = 5
    teacher = 1e4 * np.eye(b)
    uniform = np.zeros((b, b))
    assert float(distill_loss((uniform, uniform), (teacher, teacher)).data) == pytest.approx(2 * math.log(b), abs=1e-12)


def test_distill_gradient_is_softmax_difference(rng):
    # the I2T direction alone; the T2I pair is held fixed at zeros
    s, t = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    leaf = Tensor(s.copy(), requires_grad=True)
    backward(distill_loss((leaf, np.zeros((4, 4))), (t, np.zeros((4, 4)))))

    def softmax(z):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    np.testing.assert_allclose(leaf.grad, (softmax(s) - softmax(t)) / 4, atol=1e-12)

    num = np.zeros_like(s)
    for idx in np.ndindex(s.shape):
        keep = s[idx]
        s[idx] = keep + 1e-5
        up = float(distill_loss((s, np.zeros((4, 4))), (t, np.zeros((4, 4)))).data)
        s[idx] = keep - 1e-5
        down = float(distill_loss((s, np.zeros((4, 4))), (t, np.zeros((4, 4)))).data)
        s[idx] = keep
        num[idx] = (up - down) / 2e-5
    assert np.max(np.abs(num - leaf.grad)) <= 1e-6


def test_total_loss_arithmetic():
    assert float(total_loss(2.0, 4.0, LossWeights(0.5)).data) == 3.0
