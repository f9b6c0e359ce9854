import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scanreid import numkit as nk
from scanreid.errors import ContractError
from scanreid.losses import LossValue, OimTable, bce_with_logit, oim_forward, oim_update, total_loss


def test_bce_examples():
    v = bce_with_logit(0.0, 1)
    assert v.value == pytest.approx(np.log(2), abs=1e-12) and v.grads["logit"] == -0.5
    v = bce_with_logit(30.0, 1)
    assert v.value < 1e-9 and abs(v.grads["logit"]) < 1e-9
    v = bce_with_logit(1.0, 0)
    assert v.value == pytest.approx(1.31326, abs=1e-5)
    assert v.grads["logit"] == pytest.approx(0.73106, abs=1e-5)


@settings(max_examples=200, deadline=None)
@given(st.floats(-700, 700), st.sampled_from([0, 1]))
def test_bce_properties(z, y):
    v = bce_with_logit(z, y)
    assert v.value >= 0
    assert -1 <= v.grads["logit"] <= 1
    assert v.grads["logit"] == nk.sigmoid(z) - y


def test_bce_rejects_nonfinite():
    with pytest.raises(ContractError):
        bce_with_logit(float("nan"), 1)


def test_oim_single_class_is_zero(rng):
    table = OimTable.random(1, 4, rng)
    assert oim_forward(rng.standard_normal(4), 0, table).value == pytest.approx(0.0, abs=1e-15)


def test_oim_two_class_hand_value():
    table = OimTable(np.eye(2), temperature=1.0)
    v = oim_forward(np.array([1.0, 0.0]), 0, table)
    assert v.value == pytest.approx(-np.log(np.e / (np.e + 1)), abs=1e-12)
    assert v.value == pytest.approx(0.31326, abs=1e-5)


def test_oim_gradient_fd(rng):
    table = OimTable.random(5, 6, rng)
    feat = rng.standard_normal((3, 6))
    ids = np.array([0, 4, 2])
    g = oim_forward(feat, ids, table).grads["feature"]
    rep = nk.check_gradients(lambda: oim_forward(feat, ids, table).value, {"f": feat}, {"f": g}, tol=1e-5)
    assert rep.passed, rep


def test_oim_scale_invariant(rng):
    table = OimTable.random(4, 5, rng)
    f = rng.standard_normal(5)
    assert oim_forward(f, 2, table).value == pytest.approx(oim_forward(7.5 * f, 2, table).value, abs=1e-12)


def test_oim_errors(rng):
    table = OimTable.random(3, 4, rng)
    with pytest.raises(ContractError):
        oim_forward(np.zeros(4), 0, table)
    with pytest.raises(ContractError):
        oim_forward(np.ones(4), 3, table)


def test_oim_update_examples(rng):
    table = OimTable(np.array([[1.0, 0.0], [0.0, 1.0]]), momentum=0.5)
    oim_update(table, np.array([0.0, 2.0]), 0)
    np.testing.assert_allclose(table.prototypes[0], [0.70711, 0.70711], atol=1e-5)
    np.testing.assert_array_equal(table.prototypes[1], [0, 1])

    frozen = OimTable.random(3, 4, rng, momentum=1.0)
    before = frozen.prototypes.copy()
    oim_update(frozen, rng.standard_normal(4), 1)
    assert np.array_equal(frozen.prototypes, before)

    zero = OimTable.random(3, 4, rng, momentum=0.0)
    f = rng.standard_normal(4)
    oim_update(zero, f, 2)
    np.testing.assert_allclose(zero.prototypes[2], f / np.linalg.norm(f), atol=1e-15)


def test_oim_rows_stay_unit_norm(rng):
    table = OimTable.random(6, 8, rng)
    for _ in range(2000):
        oim_update(table, rng.standard_normal(8) * rng.uniform(1e-3, 1e3), int(rng.integers(6)))
    np.testing.assert_allclose(np.linalg.norm(table.prototypes, axis=1), 1.0, atol=1e-10)


def test_total_loss_examples():
    bce = LossValue(1.0, {"logit": np.array(0.2)})
    oims = [LossValue(0.25, {"feature": np.ones(2)}), LossValue(0.75, {"feature": np.ones(2)})]
    assert total_loss(bce, oims, 0.0).value == 1.0
    out = total_loss(bce, oims, 1.0)
    assert out.value == 1.5
    np.testing.assert_array_equal(out.grads["feature"], [1, 1])
    with pytest.raises(ValueError):
        total_loss(bce, oims, -1.0)


def test_total_loss_gradient_fd(rng):
    table = OimTable.random(3, 4, rng)
    feat = rng.standard_normal(4)
    z = np.array(0.3)
    lam = 0.7

    def value():
        return total_loss(bce_with_logit(z, 1), [oim_forward(feat, 1, table)], lam).value

    out = total_loss(bce_with_logit(z, 1), [oim_forward(feat, 1, table)], lam)
    rep = nk.check_gradients(value, {"feature": feat, "logit": z},
                             {"feature": out.grads["feature"], "logit": out.grads["logit"]}, tol=1e-5)
    assert rep.passed, rep
