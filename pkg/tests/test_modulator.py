import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from dasm.autodiff import Tensor
from dasm.modulator import (XI, DomainCenterBank, adaptive_weights, adgm_loss, compute_gaps,
                            gap_state_from_values, inactive_state)
from oracles import central_diff, max_rel_err, scalar_adgm, scalar_weights

gap_lists = st.lists(st.floats(0.0, 50.0), min_size=1, max_size=8)


def test_worked_example_against_scalar_oracle():
    # the oracle is plain-float arithmetic, independent of the vectorized code
    w_ref = scalar_weights([1.0, 3.0])
    assert abs(w_ref[0] - 0.8808) < 1e-3 and abs(w_ref[1] - 0.1192) < 1e-3
    w, tau = adaptive_weights([1.0, 3.0])
    assert abs(tau - 1.0) < 1e-7
    assert np.allclose(w, w_ref, atol=1e-12)
    loss = adgm_loss(gap_state_from_values([1.0, 3.0])).item()
    assert abs(scalar_adgm([1.0, 3.0]) - 0.5872) < 1e-3
    assert abs(loss - scalar_adgm([1.0, 3.0])) < 1e-12


def test_equal_gaps_and_single_domain():
    w, _ = adaptive_weights([2.0, 2.0, 2.0, 2.0])
    assert np.allclose(w, 0.25, atol=1e-15)
    g = 2.0
    assert abs(adgm_loss(gap_state_from_values([g] * 4)).item() - XI / (g + XI)) < 1e-15
    assert adaptive_weights([7.3])[0][0] == 1.0
    assert abs(adgm_loss(gap_state_from_values([1e-12])).item() - 1.0) < 1e-3


def test_inactive_state_gives_zero():
    assert adgm_loss(inactive_state()).item() == 0.0
    bank = DomainCenterBank(3, 2)
    bank.update(np.ones((2, 2)), np.array([0, 0]))
    assert not compute_gaps(bank, Tensor(np.ones((2, 2))), np.array([0, 0])).active


@settings(max_examples=300, deadline=None)
@given(gap_lists)
def test_weights_sum_to_one_and_loss_range(gaps):
    w, tau = adaptive_weights(gaps)
    assert abs(w.sum() - 1.0) < 1e-12 and tau > 0
    loss = adgm_loss(gap_state_from_values(gaps)).item()
    if max(gaps) > 1e-12:
        assert 0.0 <= loss < 1.0
    else:
        # below float resolution relative to xi the loss rounds to exactly 1
        assert 0.0 <= loss <= 1.0


def test_weights_sum_on_many_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        g = rng.exponential(rng.uniform(0.01, 10), size=rng.integers(1, 9))
        w, _ = adaptive_weights(g)
        assert abs(w.sum() - 1.0) < 1e-12
        assert 0.0 <= adgm_loss(gap_state_from_values(g)).item() < 1.0


@settings(max_examples=200, deadline=None)
@given(gap_lists)
def test_smaller_gap_larger_weight(gaps):
    g = np.asarray(gaps)
    w, _ = adaptive_weights(g)
    for a in range(g.size):
        for b in range(g.size):
            if g[a] < g[b] and (g[b] - g[a]) / (g.std() + XI) > 1e-9:
                assert w[a] > w[b]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.1, 10.0), min_size=2, max_size=6), st.floats(0.5, 5.0))
def test_shift_changes_loss_not_weights(gaps, c):
    g = np.asarray(gaps)
    assume(g.std() > 1e-3)
    w1, _ = adaptive_weights(g)
    w2, _ = adaptive_weights(g + c)
    assert np.allclose(w1, w2, atol=1e-9)
    l1 = adgm_loss(gap_state_from_values(g)).item()
    l2 = adgm_loss(gap_state_from_values(g + c)).item()
    assert abs(l1 - l2) > 1e-12


def test_expanding_hardest_gap_never_increases_loss():
    rng = np.random.default_rng(11)
    for _ in range(5000):
        g = rng.uniform(0.01, 5.0, size=rng.integers(2, 7))
        k = int(np.argmin(g))
        if g[k] == g.max():
            continue
        g2 = g.copy()
        g2[k] = rng.uniform(g[k], g.max())
        before = adgm_loss(gap_state_from_values(g)).item()
        after = adgm_loss(gap_state_from_values(g2)).item()
        assert after <= before + 1e-12


def test_ema_examples():
    bank = DomainCenterBank(1, 2, momentum=0.9)
    bank.update(np.array([[1.0, 0.0]]), np.array([1]))
    bank.update(np.array([[0.0, 1.0]]), np.array([1]))
    assert np.allclose(bank.centers[1], [0.9, 0.1], atol=1e-15)
    b0 = DomainCenterBank(1, 2, momentum=0.0)
    b0.update(np.ones((2, 2)), np.array([1, 1]))
    b0.update(np.array([[1.0, 3.0], [3.0, 5.0]]), np.array([1, 1]))
    assert np.array_equal(b0.centers[1], [2.0, 4.0])
    b1 = DomainCenterBank(1, 2, momentum=1.0)
    b1.update(np.ones((1, 2)), np.array([1]))
    b1.update(np.zeros((1, 2)), np.array([1]))
    assert np.array_equal(b1.centers[1], [1.0, 1.0])


def test_ema_untouched_absent_domain_and_index_error():
    bank = DomainCenterBank(2, 2)
    bank.update(np.ones((1, 2)), np.array([1]))
    assert not bank.initialized[2] and np.array_equal(bank.centers[2], [0.0, 0.0])
    with pytest.raises(IndexError):
        bank.update(np.ones((1, 2)), np.array([3]))


def test_ema_geometric_convergence():
    mu = 0.7
    bank = DomainCenterBank(1, 3, momentum=mu)
    target = np.array([0.2, -0.4, 1.0])
    bank.update(np.zeros((1, 3)), np.array([1]))
    prev = np.linalg.norm(bank.centers[1] - target)
    for _ in range(20):
        bank.update(target[None], np.array([1]))
        cur = np.linalg.norm(bank.centers[1] - target)
        assert abs(cur / prev - mu) < 1e-12 * 10
        prev = cur


def test_uninitialized_domains_excluded():
    bank = DomainCenterBank(3, 2)
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    bank.update(z, np.array([0, 2]))
    st_ = compute_gaps(bank, Tensor(z), np.array([0, 2]))
    assert list(st_.domains) == [2] and st_.weights.tolist() == [1.0]


def test_gap_gradient_flows_through_batch_means_only():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(8, 3))
    d = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    bank = DomainCenterBank(3, 3)
    bank.update(rng.normal(size=(8, 3)), d)
    frozen = (bank.active_domains, *adaptive_weights(bank.ema_gaps()))

    def value(arr):
        return adgm_loss(compute_gaps(bank, Tensor(arr), d, frozen)).item()

    t = Tensor(z, requires_grad=True)
    adgm_loss(compute_gaps(bank, t, d, frozen)).backward()
    fd = central_diff(lambda: value(z), [z])[0]
    assert max_rel_err(t.grad, fd) < 1e-4
    # cover rows do not move the loss (cover reference is the EMA center)
    assert np.array_equal(t.grad[:2], np.zeros((2, 3)))
    centers_before = bank.centers.copy()
    value(z)
    assert np.array_equal(bank.centers, centers_before)


def test_absent_domain_uses_ema_gap():
    bank = DomainCenterBank(2, 2)
    bank.update(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]), np.array([0, 1, 2]))
    z = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    st_ = compute_gaps(bank, z, np.array([0, 1]))
    assert abs(st_.gaps.data[1] - math.sqrt(2.0)) < 1e-12
