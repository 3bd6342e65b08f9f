import numpy as np
import pytest
from hypothesis import given, strategies as st

from udaforge.graph import ParamSet
from udaforge.optim import adam_step, lr_schedule


def test_zero_gradient_leaves_params_unchanged():
    ps = ParamSet({"w": np.array([1.0, -2.0])})
    before = ps.tensors["w"].copy()
    adam_step(ps, {"w": np.zeros(2)}, lr=0.1)
    assert np.array_equal(ps.tensors["w"], before)
    assert ps.step == 1


def test_first_step_is_bias_corrected():
    # g=1 constantly: first update is lr / (1 + eps) ~ lr
    ps = ParamSet({"w": np.array([0.5])})
    adam_step(ps, {"w": np.array([1.0])}, lr=0.1)
    delta = 0.5 - ps.tensors["w"][0]
    assert delta == pytest.approx(0.1, abs=1e-8)


def test_adam_is_deterministic():
    def run():
        ps = ParamSet({"w": np.linspace(-1, 1, 6)})
        g = {"w": np.linspace(0.5, -0.5, 6)}
        for _ in range(5):
            adam_step(ps, g, lr=0.01)
        return ps.tensors["w"].copy()

    assert np.array_equal(run(), run())


def test_missing_gradient_treated_as_zero():
    ps = ParamSet({"w": np.ones(2), "b": np.ones(1)})
    adam_step(ps, {"w": np.ones(2)}, lr=0.1)
    assert np.array_equal(ps.tensors["b"], np.ones(1))


def test_adam_rejects_shape_mismatch():
    ps = ParamSet({"w": np.ones(2)})
    with pytest.raises(ValueError):
        adam_step(ps, {"w": np.ones(3)}, lr=0.1)


def test_adam_rejects_nonpositive_lr():
    ps = ParamSet({"w": np.ones(2)})
    with pytest.raises(ValueError):
        adam_step(ps, {"w": np.ones(2)}, lr=0.0)


def test_lr_schedule_paper_values():
    assert lr_schedule(0.01, 0, 20, 0.5) == pytest.approx(0.01)
    assert lr_schedule(0.01, 19, 20, 0.5) == pytest.approx(0.01)
    assert lr_schedule(0.01, 20, 20, 0.5) == pytest.approx(0.005)
    assert lr_schedule(0.01, 40, 20, 0.5) == pytest.approx(0.0025)


@given(
    base=st.floats(1e-5, 1.0),
    epochs=st.integers(0, 200),
    step=st.integers(1, 50),
)
def test_lr_schedule_identity_when_decay_is_one(base, epochs, step):
    assert lr_schedule(base, epochs, step, 1.0) == pytest.approx(base)


@given(
    base=st.floats(1e-5, 1.0),
    step=st.integers(1, 50),
    decay=st.floats(0.1, 1.0),
)
def test_lr_schedule_non_increasing(base, step, decay):
    lrs = [lr_schedule(base, e, step, decay) for e in range(100)]
    assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))


def test_lr_schedule_rejects_bad_step_size():
    with pytest.raises(ValueError):
        lr_schedule(0.01, 5, 0, 0.5)
