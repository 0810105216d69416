import math

import numpy as np
import pytest

from blocklora.errors import ConfigError, DegenerateEmbeddingError, LabelError, ShapeError
from blocklora.losses import LossKind, loss_contrastive, loss_fsl

from conftest import finite_difference, rel_err

LN_1P_EXP_M1 = 0.31326168751822286  # ln(1 + e^-1)


def test_contrastive_orthogonal_pair():
    # cosines 1 on the diagonal, 0 off it; temperature 1 leaves logits as-is
    V = np.eye(2)
    res = loss_contrastive(V, V.copy(), temperature=1.0)
    assert abs(res.value - LN_1P_EXP_M1) <= 1e-12


def test_contrastive_is_scale_invariant(rng):
    V, T = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    a = loss_contrastive(V, T).value
    b = loss_contrastive(3.0 * V, 0.5 * T).value
    assert abs(a - b) <= 1e-12


def test_classwise_hand_case():
    V = np.array([[1.0, 0.0], [0.0, 2.0]])
    res = loss_fsl(V, np.eye(2), [0, 1], temperature=1.0, variant="classwise")
    assert abs(res.value - LN_1P_EXP_M1) <= 1e-12


def test_as_written_hand_case():
    # two supports of class 0 and one of class 1; denominator runs over three gathered prompts
    V = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    res = loss_fsl(V, np.eye(2), [0, 0, 1], temperature=1.0, variant="as-written")
    e = math.e
    expected = (2 * -math.log(e / (2 * e + 1)) - math.log(e / (e + 2))) / 3
    assert abs(res.value - expected) <= 1e-12


@pytest.mark.parametrize("variant", ["as_written", "classwise"])
def test_fsl_gradients_match_finite_differences(rng, variant):
    V, T = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
    labels = [0, 1, 2, 0, 1, 2]
    res = loss_fsl(V, T, labels, 0.5, variant)
    gV = finite_difference(lambda v: loss_fsl(v, T, labels, 0.5, variant).value, V)
    gT = finite_difference(lambda t: loss_fsl(V, t, labels, 0.5, variant).value, T)
    assert rel_err(res.grad_V, gV) <= 1e-5
    assert rel_err(res.grad_T, gT) <= 1e-5


def test_contrastive_gradients(rng):
    V, T = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    res = loss_contrastive(V, T, 0.3)
    assert rel_err(res.grad_V, finite_difference(lambda v: loss_contrastive(v, T, 0.3).value, V)) <= 1e-5
    assert rel_err(res.grad_T, finite_difference(lambda t: loss_contrastive(V, t, 0.3).value, T)) <= 1e-5


def test_extreme_logits_stay_finite():
    V = np.array([[1.0, 0.0], [0.0, 1.0]])
    res = loss_contrastive(V, V.copy(), temperature=1e-4)
    assert np.isfinite(res.value) and np.all(np.isfinite(res.grad_V))


def test_errors(rng):
    V = rng.normal(size=(3, 2))
    with pytest.raises(DegenerateEmbeddingError):
        loss_contrastive(np.zeros((2, 2)), np.eye(2))
    with pytest.raises(LabelError):
        loss_fsl(V, np.eye(2), [0, 1, 2])
    with pytest.raises(ShapeError):
        loss_contrastive(V, V[:2])
    with pytest.raises(ShapeError):
        loss_contrastive(V[:1], V[:1])
    with pytest.raises(ConfigError):
        loss_fsl(V, np.eye(2), [0, 1, 0], temperature=0.0)
    with pytest.raises(ConfigError):
        LossKind.parse("hinge")


def test_single_class_support_has_zero_gradient(rng):
    # every gathered text row is the same prompt, so the loss is constant
    V, T = rng.normal(size=(6, 5)), rng.normal(size=(3, 5))
    res = loss_fsl(V, T, [2] * 6, 1.0, "as_written")
    assert abs(res.value - math.log(6)) <= 1e-12
    assert np.max(np.abs(res.grad_V)) <= 1e-15 and np.max(np.abs(res.grad_T)) <= 1e-15
