import numpy as np
import pytest

from hycam import autodiff as ad
from hycam.adapters import VARIANTS
from hycam.autodiff import Parameter, Tensor
from hycam.backbone import BackboneConfig
from hycam.gradcheck import check_gradients, numerical_gradient, relative_error, tiny_gradcheck


def test_relative_error_floor():
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-5])) == pytest.approx(1e-5 / (1 + 1e-5))
    # tiny gradients fall back to the absolute bound of 1e-7
    assert relative_error(np.array([0.0]), np.array([1e-8])) <= 1e-4
    assert relative_error(np.array([0.0]), np.array([5e-7])) > 1e-4


def test_numerical_gradient_quadratic():
    p = Parameter("w", Tensor(np.array([1.0, -2.0, 3.0])))
    g = numerical_gradient(lambda: float(np.sum(p.data ** 2)), p)
    np.testing.assert_allclose(g, 2 * p.data, rtol=1e-9)


def test_report_flags_wrong_gradient():
    p = Parameter("w", Tensor(np.array([1.0, 2.0])))

    def fn():
        # forward is x^2; the recorded backward deliberately returns 3x
        x = p.tensor
        return ad._make(np.sum(x.data ** 2), (x,), lambda g: (3 * g * x.data,), "bad")

    rep = check_gradients(fn, [p])
    assert not rep.passed and rep.failures == ["w"]
    assert "FAIL w" in rep.to_text()


def test_rejects_big_models():
    with pytest.raises(ValueError):
        tiny_gradcheck(backbone=BackboneConfig(vocab_size=45, d_model=32, n_heads=2, d_ff=32, max_seq_len=24))


@pytest.mark.slow
@pytest.mark.parametrize("variant", VARIANTS)
def test_all_variants_pass(variant):
    rep = tiny_gradcheck(variant)
    assert rep.passed, rep.to_text()
    assert rep.max_error <= 1e-4
