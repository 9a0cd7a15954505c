import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ictseg.data import Raster
from ictseg.mixing import MixPolicy, draw_alpha, mix


def _prob(rng, shape):
    p = rng.random(shape)
    return p / p.sum(axis=-1, keepdims=True)


def test_endpoint_identity():
    u = Raster(np.random.default_rng(0).random((5, 5, 1)))
    v = Raster(np.random.default_rng(1).random((5, 5, 1)))
    assert np.array_equal(mix(u, v, 1.0).values, u.values)
    assert np.array_equal(mix(u, v, 0.0).values, v.values)


def test_arithmetic():
    out = mix(Raster(np.zeros((3, 3))), Raster(np.full((3, 3), 2.0)), 0.5)
    assert np.all(out.values == 1.0)


def test_probability_closure_exhaustive():
    rng = np.random.default_rng(3)
    p = Raster(_prob(rng, (8, 8, 4)), kind="probability")
    q = Raster(_prob(rng, (8, 8, 4)), kind="probability")
    out = mix(p, q, 0.3)
    assert out.kind == "probability"
    for r in range(8):
        for c in range(8):
            assert abs(sum(out.values[r, c]) - 1.0) < 1e-9
            assert min(out.values[r, c]) >= 0


def test_tensor_batch_alpha_broadcast():
    a = torch.zeros(3, 2, 4, 4)
    b = torch.ones(3, 2, 4, 4)
    alpha = torch.tensor([0.0, 0.5, 1.0]).reshape(-1, 1, 1, 1)
    out = mix(a, b, alpha)
    assert torch.all(out[0] == 1) and torch.all(out[1] == 0.5) and torch.all(out[2] == 0)


def test_rejects_labels_and_bad_inputs():
    lab = Raster(np.zeros((2, 2), np.uint8), kind="label")
    with pytest.raises(TypeError):
        mix(lab, lab, 0.5)
    with pytest.raises(TypeError):
        mix(torch.zeros(2, dtype=torch.long), torch.zeros(2, dtype=torch.long), 0.5)
    with pytest.raises(ValueError):
        mix(np.zeros(3), np.zeros(4), 0.5)
    with pytest.raises(ValueError):
        mix(np.zeros(3), np.zeros(3), 1.5)
    with pytest.raises(ValueError):
        mix(np.zeros(3), np.zeros(3), -0.01)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(
    a=arrays(np.float64, (3, 4), elements=finite),
    b=arrays(np.float64, (3, 4), elements=finite),
    alpha=st.floats(0.0, 1.0),
)
def test_symmetry(a, b, alpha):
    # alpha*a + (1-alpha)*b versus (1-alpha)*b + (1-(1-alpha))*a; 1-(1-alpha) can differ from alpha by an ulp
    lhs = mix(a, b, alpha)
    rhs = mix(b, a, 1.0 - alpha)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(
    a=arrays(np.float64, (3, 4), elements=finite),
    b=arrays(np.float64, (3, 4), elements=finite),
    c=arrays(np.float64, (3, 4), elements=finite),
    alpha=st.floats(0.0, 1.0),
)
def test_linearity(a, b, c, alpha):
    np.testing.assert_allclose(mix(a + c, b, alpha), mix(a, b, alpha) + alpha * c, rtol=1e-12, atol=1e-9)


def test_symmetry_exact_at_dyadic_alphas():
    rng = np.random.default_rng(0)
    a, b = rng.random((4, 4)), rng.random((4, 4))
    for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
        assert np.array_equal(mix(a, b, alpha), mix(b, a, 1.0 - alpha))


class TestDrawAlpha:
    def test_fixed(self):
        rng = np.random.default_rng(0)
        before = rng.bit_generator.state
        policy = MixPolicy("fixed", alpha_fixed=0.5)
        assert all(draw_alpha(policy, rng) == 0.5 for _ in range(10))
        assert rng.bit_generator.state == before

    def test_beta_uniform_mean(self):
        rng = np.random.default_rng(1)
        draws = [draw_alpha(MixPolicy("beta", beta_a=1.0), rng) for _ in range(10_000)]
        assert 0.48 <= np.mean(draws) <= 0.52

    @pytest.mark.parametrize("a", [0.1, 0.5, 2.0, 20.0])
    def test_beta_support(self, a):
        rng = np.random.default_rng(2)
        draws = np.array([draw_alpha(MixPolicy("beta", beta_a=a), rng) for _ in range(10_000)])
        assert draws.min() >= 0.0 and draws.max() <= 1.0

    def test_per_sample(self):
        rng = np.random.default_rng(0)
        out = draw_alpha(MixPolicy("beta", beta_a=1.0, resample="per_sample"), rng, batch_size=5)
        assert out.shape == (5,)
        assert len(set(out.tolist())) == 5

    @pytest.mark.parametrize(
        "kwargs", [dict(mode="other"), dict(alpha_fixed=1.2), dict(mode="beta", beta_a=0.0), dict(resample="x")]
    )
    def test_invalid_policy(self, kwargs):
        with pytest.raises(ValueError):
            MixPolicy(**kwargs)
