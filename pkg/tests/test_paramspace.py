"""Layout, perturbation, and seeding contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import forgetlab.autodiff as ad
from forgetlab.autodiff import Tensor
from forgetlab.errors import ContractViolation, InvalidArgument
from forgetlab.paramspace import (ParamLayout, ParamVector, Perturbation,
                                  apply_perturbation, bind, child_rng,
                                  collect_gradient, forward_backward,
                                  gaussian_perturbation, rademacher_probe,
                                  stable_hash)


def _layout():
    return ParamLayout.build([("w", (2, 3)), ("b", (3,)), ("s", ())])


def test_stable_hash_is_stable_and_key_sensitive():
    # frozen value: platform- and session-independent by construction
    assert stable_hash("a", 1) == stable_hash("a", 1)
    assert stable_hash("a", 1) != stable_hash("a", 2)
    assert stable_hash("a", 1) != stable_hash(1, "a")
    # int 1 and string "1" must not collide
    assert stable_hash(1) != stable_hash("1")


def test_child_rng_streams():
    a = child_rng(0, "x").standard_normal(4)
    b = child_rng(0, "x").standard_normal(4)
    c = child_rng(0, "y").standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_layout_offsets_and_views():
    lay = _layout()
    assert lay.dim == 6 + 3 + 1
    assert lay.entries == (("w", 0, (2, 3)), ("b", 6, (3,)), ("s", 9, ()))
    values = np.arange(10.0)
    views = lay.views(values)
    assert views["w"].shape == (2, 3)
    views["b"][0] = -1.0  # views alias, not copy
    assert values[6] == -1.0
    assert lay.slice_of("s") == (9, 10, ())
    with pytest.raises(InvalidArgument):
        lay.slice_of("missing")
    with pytest.raises(InvalidArgument):
        ParamLayout.build([("w", (2,)), ("w", (3,))])


def test_param_vector_contracts():
    lay = _layout()
    with pytest.raises(InvalidArgument):
        ParamVector(np.zeros(5), lay)
    with pytest.raises(InvalidArgument):
        ParamVector(np.zeros((2, 5)), lay)
    pv = ParamVector(np.arange(10.0), lay)
    dup = pv.copy()
    dup.values[0] = 99.0
    assert pv.values[0] == 0.0
    np.testing.assert_array_equal(pv.segment("b"), np.array([6.0, 7.0, 8.0]))


def test_gaussian_perturbation_determinism_and_moments():
    p1 = gaussian_perturbation(4000, 0.01, seed=42)
    p2 = gaussian_perturbation(4000, 0.01, seed=42)
    p3 = gaussian_perturbation(4000, 0.01, seed=43)
    np.testing.assert_array_equal(p1.delta, p2.delta)
    assert not np.array_equal(p1.delta, p3.delta)
    assert isinstance(p1, Perturbation) and p1.sigma == 0.01 and p1.seed == 42
    assert abs(p1.delta.mean()) < 5e-4
    assert abs(p1.delta.std() - 0.01) < 5e-4
    with pytest.raises(InvalidArgument):
        gaussian_perturbation(0, 0.01, 0)
    with pytest.raises(InvalidArgument):
        gaussian_perturbation(10, 0.0, 0)


def test_rademacher_probe_signs():
    v = rademacher_probe(1000, seed=5)
    assert set(np.unique(v)) == {-1.0, 1.0}
    np.testing.assert_array_equal(v, rademacher_probe(1000, seed=5))


def test_apply_perturbation_immutability():
    lay = _layout()
    theta = ParamVector(np.ones(10), lay)
    pert = gaussian_perturbation(10, 0.5, seed=1)
    moved = apply_perturbation(theta, pert)
    np.testing.assert_array_equal(theta.values, np.ones(10))
    np.testing.assert_allclose(moved.values, 1.0 + pert.delta)
    back = apply_perturbation(moved, pert, scale=-1.0)
    np.testing.assert_allclose(back.values, 1.0, rtol=1e-12)
    zero = apply_perturbation(theta, pert, scale=0.0)
    assert zero.values is not theta.values
    with pytest.raises(InvalidArgument):
        apply_perturbation(theta, np.zeros(9))


def test_bind_collect_roundtrip():
    lay = _layout()
    theta = ParamVector(np.arange(10.0), lay)
    leaves = bind(theta, requires_grad=True)
    assert set(leaves) == {"w", "b", "s"}
    assert all(t.requires_grad for t in leaves.values())
    # loss = sum(w * 2) + sum(b) ; s unused -> zero gradient segment
    loss = ad.add(ad.tensor_sum(ad.mul(leaves["w"], 2.0)),
                  ad.tensor_sum(leaves["b"]))
    value, grad = forward_backward(loss, leaves, lay)
    assert value == pytest.approx(2.0 * np.arange(6.0).sum() + 6 + 7 + 8)
    np.testing.assert_array_equal(grad.values[:6], 2.0)
    np.testing.assert_array_equal(grad.values[6:9], 1.0)
    assert grad.values[9] == 0.0


def test_forward_backward_rejects_nonscalar():
    lay = _layout()
    leaves = bind(ParamVector(np.ones(10), lay), requires_grad=True)
    with pytest.raises(ContractViolation):
        forward_backward(ad.mul(leaves["w"], 1.0), leaves, lay)


def test_quadratic_form_matches_sigma_sq_trace():
    # E[delta^T A delta] = sigma^2 Tr(A) for delta ~ N(0, sigma^2 I)
    rng = np.random.default_rng(11)
    d, sigma = 10, 0.05
    a = rng.normal(size=(d, d))
    # diagonal shift keeps |Tr(A)| well away from zero so the relative
    # tolerance below is meaningful
    a = (a + a.T) / 2.0 + 3.0 * np.eye(d)
    draws = [gaussian_perturbation(d, sigma, seed=k).delta for k in range(4000)]
    vals = [float(delta @ a @ delta) for delta in draws]
    expect = sigma * sigma * np.trace(a)
    assert abs(np.mean(vals) - expect) <= 0.10 * abs(expect)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2**63 - 1), st.integers(1, 50))
def test_perturbation_scales_linearly_in_sigma(seed, dim):
    base = gaussian_perturbation(dim, 1.0, seed)
    scaled = gaussian_perturbation(dim, 2.5, seed)
    np.testing.assert_allclose(scaled.delta, 2.5 * base.delta, rtol=1e-12)
