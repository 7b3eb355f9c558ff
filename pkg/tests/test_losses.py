"""Contrastive losses: oracles, reductions, vMF weighting, annealing."""

import math

import numpy as np
import pytest

from shaperet.errors import ParameterError
from shaperet.losses import (BetaSchedule, anneal_beta, hcl, info_nce, vmf_weights)

from support import check_grad_entries, random_unit_rows

# -----------------------------------------------------------------------------
# Independent oracles (plain-python transcriptions, no shared code paths)
# -----------------------------------------------------------------------------


def info_nce_reference(u, v, tau):
    """Direct loop transcription of the symmetric objective."""
    n = len(u)
    total = 0.0
    for i in range(n):
        num = math.exp(float(np.dot(u[i], v[i])) / tau)
        den_row = sum(math.exp(float(np.dot(u[i], v[j])) / tau) for j in range(n))
        den_col = sum(math.exp(float(np.dot(u[j], v[i])) / tau) for j in range(n))
        total += -0.5 * math.log(num / den_row) - 0.5 * math.log(num / den_col)
    return total / n


def hcl_reference(u, v, tau, beta):
    """Loop transcription: Q * self-normalized vMF expectation per anchor."""
    n = len(u)
    q = n - 1
    total = 0.0
    for i in range(n):
        pos = math.exp(float(np.dot(u[i], v[i])) / tau)
        w_im = [math.exp(beta * float(np.dot(u[i], v[j]))) for j in range(n) if j != i]
        z = sum(w_im)
        e_im = sum(wj / z * math.exp(float(np.dot(u[i], v[j])) / tau)
                   for wj, j in zip(w_im, [j for j in range(n) if j != i]))
        w_p = [math.exp(beta * float(np.dot(u[j], v[i]))) for j in range(n) if j != i]
        zp = sum(w_p)
        e_p = sum(wj / zp * math.exp(float(np.dot(u[j], v[i])) / tau)
                  for wj, j in zip(w_p, [j for j in range(n) if j != i]))
        total += -0.5 * math.log(pos / (pos + q * e_im)) - 0.5 * math.log(pos / (pos + q * e_p))
    return total / n


# -----------------------------------------------------------------------------
# info_nce
# -----------------------------------------------------------------------------


def test_info_nce_single_pair_is_zero():
    rng = np.random.default_rng(0)
    u = random_unit_rows(rng, 1, 8)
    v = random_unit_rows(rng, 1, 8)
    out = info_nce(u, v, 0.07)
    assert out.loss == 0.0
    assert np.allclose(out.d_shape, 0.0, atol=1e-15)
    assert np.allclose(out.d_image, 0.0, atol=1e-15)


def test_info_nce_identical_batch_is_log_n():
    rng = np.random.default_rng(1)
    row = random_unit_rows(rng, 1, 16)
    batch = np.tile(row, (6, 1))
    out = info_nce(batch, batch, 0.07)
    assert out.loss == pytest.approx(math.log(6), abs=1e-12)


def test_info_nce_matches_reference_transcription():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(2, 9))
        u = random_unit_rows(rng, n, 64)
        v = random_unit_rows(rng, n, 64)
        tau = float(rng.uniform(0.02, 0.9))
        assert info_nce(u, v, tau).loss == pytest.approx(
            info_nce_reference(u, v, tau), abs=1e-12)


def test_info_nce_nonnegative_and_validates():
    rng = np.random.default_rng(3)
    u = random_unit_rows(rng, 5, 32)
    v = random_unit_rows(rng, 5, 32)
    assert info_nce(u, v, 0.1).loss >= 0.0
    with pytest.raises(ParameterError):
        info_nce(np.empty((0, 8)), np.empty((0, 8)), 0.1)
    with pytest.raises(ParameterError):
        info_nce(u * 2.0, v, 0.1)
    with pytest.raises(ParameterError):
        info_nce(u, v, 0.0)


def test_info_nce_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(5):
        n = int(rng.integers(2, 7))
        u = random_unit_rows(rng, n, 16)
        v = random_unit_rows(rng, n, 16)
        tau = float(rng.uniform(0.05, 0.5))
        out = info_nce(u, v, tau, validate=False)
        w, _ = check_grad_entries(lambda: info_nce(u, v, tau, validate=False).loss,
                                  u, out.d_shape, rng, 20)
        worst = max(worst, w)
        w, _ = check_grad_entries(lambda: info_nce(u, v, tau, validate=False).loss,
                                  v, out.d_image, rng, 20)
        worst = max(worst, w)
        log_tau = np.array(math.log(tau))
        w, _ = check_grad_entries(
            lambda: info_nce(u, v, float(np.exp(log_tau)), validate=False).loss,
            log_tau.reshape(()), np.array(out.d_log_tau).reshape(()), rng, 1)
        worst = max(worst, w)
    assert worst < 1e-4


def test_info_nce_permutation_equivariance():
    rng = np.random.default_rng(5)
    n = 7
    u = random_unit_rows(rng, n, 24)
    v = random_unit_rows(rng, n, 24)
    base = info_nce(u, v, 0.09)
    perm = rng.permutation(n)
    permuted = info_nce(u[perm], v[perm], 0.09)
    assert permuted.loss == pytest.approx(base.loss, abs=1e-12)
    assert np.allclose(permuted.d_shape, base.d_shape[perm], atol=1e-12)
    assert np.allclose(permuted.d_image, base.d_image[perm], atol=1e-12)


# -----------------------------------------------------------------------------
# vmf_weights
# -----------------------------------------------------------------------------


def test_vmf_uniform_at_beta_zero():
    rng = np.random.default_rng(6)
    negatives = random_unit_rows(rng, 9, 16)
    w = vmf_weights(negatives[0], negatives, 0.0)
    assert np.allclose(w, 1.0 / 9.0, atol=1e-15)


def test_vmf_equal_similarities_uniform():
    anchor = np.array([1.0, 0.0, 0.0])
    negatives = np.array([[0.5, math.sqrt(0.75), 0.0],
                          [0.5, -math.sqrt(0.75), 0.0],
                          [0.5, 0.0, math.sqrt(0.75)]])
    w = vmf_weights(anchor, negatives, 3.7)
    assert np.allclose(w, 1.0 / 3.0, atol=1e-12)


def test_vmf_hand_computed_two_negatives():
    anchor = np.array([1.0, 0.0])
    negatives = np.array([[1.0, 0.0], [0.0, 1.0]])  # sims 1.0 and 0.0
    w = vmf_weights(anchor, negatives, 1.0)
    e = math.e
    assert w == pytest.approx([e / (e + 1.0), 1.0 / (e + 1.0)], abs=1e-12)


def test_vmf_weights_sum_to_one_and_validate():
    rng = np.random.default_rng(7)
    for _ in range(100):
        q = int(rng.integers(1, 40))
        negatives = random_unit_rows(rng, q, 12)
        anchor = random_unit_rows(rng, 1, 12)[0]
        beta = float(rng.uniform(0.0, 8.0))
        w = vmf_weights(anchor, negatives, beta)
        assert abs(w.sum() - 1.0) <= 1e-9
        assert np.all(w >= 0.0)
    with pytest.raises(ParameterError):
        vmf_weights(anchor, np.empty((0, 12)), 1.0)
    with pytest.raises(ParameterError):
        vmf_weights(anchor, negatives, -0.5)


def test_vmf_entropy_nonincreasing_in_beta():
    rng = np.random.default_rng(8)
    grid = [0.0, 0.25, 0.5, 1.0, 2.0]
    for _ in range(100):
        negatives = random_unit_rows(rng, 15, 16)
        anchor = random_unit_rows(rng, 1, 16)[0]
        entropies = []
        for beta in grid:
            w = vmf_weights(anchor, negatives, beta)
            entropies.append(float(-(w * np.log(w + 1e-300)).sum()))
        for a, b in zip(entropies, entropies[1:]):
            assert b <= a + 1e-12


# -----------------------------------------------------------------------------
# hcl
# -----------------------------------------------------------------------------


def test_hcl_beta_zero_equals_info_nce():
    rng = np.random.default_rng(9)
    for _ in range(100):
        n = int(rng.integers(2, 17))
        u = random_unit_rows(rng, n, 64)
        v = random_unit_rows(rng, n, 64)
        tau = float(rng.uniform(0.02, 1.0))
        a = info_nce(u, v, tau)
        b = hcl(u, v, tau, 0.0)
        assert abs(a.loss - b.loss) <= 1e-12
        assert np.max(np.abs(a.d_shape - b.d_shape)) <= 1e-12
        assert np.max(np.abs(a.d_image - b.d_image)) <= 1e-12
        assert abs(a.d_log_tau - b.d_log_tau) <= 1e-12


def test_hcl_identical_batch_is_log_n():
    rng = np.random.default_rng(10)
    row = random_unit_rows(rng, 1, 16)
    batch = np.tile(row, (5, 1))
    assert hcl(batch, batch, 0.07, 0.7).loss == pytest.approx(math.log(5), abs=1e-12)


def test_hcl_matches_reference_transcription():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(2, 8))
        u = random_unit_rows(rng, n, 32)
        v = random_unit_rows(rng, n, 32)
        tau = float(rng.uniform(0.05, 0.8))
        beta = float(rng.uniform(0.0, 4.0))
        assert hcl(u, v, tau, beta).loss == pytest.approx(
            hcl_reference(u, v, tau, beta), rel=1e-12)


def test_hcl_hardest_negative_dominates_at_large_beta():
    # anchor 0: positive sim s_p, one negative at 0.99, the rest at -0.5
    rng = np.random.default_rng(12)
    n = 6
    d = 8
    base = np.zeros(d)
    base[0] = 1.0
    u = np.tile(base, (n, 1))

    def with_sim(s, axis):
        v = np.zeros(d)
        v[0] = s
        v[axis] = math.sqrt(1.0 - s * s)
        return v

    v = np.stack([with_sim(0.6, 1)] + [with_sim(0.99, 2)]
                 + [with_sim(-0.5, 3)] * (n - 2))
    tau, beta = 0.2, 50.0
    # reconstruct anchor-0 row denominator from the reference formulation
    q = n - 1
    pos = math.exp(0.6 / tau)
    expected = pos + q * math.exp(0.99 / tau)
    w = [math.exp(beta * float(np.dot(u[0], v[j]))) for j in range(1, n)]
    z = sum(w)
    e_im = sum(wj * math.exp(float(np.dot(u[0], v[j])) / tau)
               for wj, j in zip(w, range(1, n))) / z
    denominator = pos + q * e_im
    assert denominator == pytest.approx(expected, rel=1e-6)


def test_hcl_requires_two_pairs():
    rng = np.random.default_rng(13)
    u = random_unit_rows(rng, 1, 8)
    with pytest.raises(ParameterError):
        hcl(u, u, 0.07, 0.5)
    with pytest.raises(ParameterError):
        hcl(random_unit_rows(rng, 3, 8), random_unit_rows(rng, 3, 8), 0.07, -1.0)


def test_hcl_loss_nondecreasing_in_beta():
    rng = np.random.default_rng(14)
    grid = [0.0, 0.25, 0.5, 1.0, 2.0]
    for _ in range(25):
        n = int(rng.integers(3, 10))
        u = random_unit_rows(rng, n, 24)
        v = random_unit_rows(rng, n, 24)
        losses = [hcl(u, v, 0.1, beta).loss for beta in grid]
        for a, b in zip(losses, losses[1:]):
            assert b >= a - 1e-12


def test_hcl_gradients_match_finite_differences():
    rng = np.random.default_rng(15)
    worst = 0.0
    for _ in range(5):
        n = int(rng.integers(2, 7))
        u = random_unit_rows(rng, n, 16)
        v = random_unit_rows(rng, n, 16)
        tau = float(rng.uniform(0.05, 0.5))
        beta = float(rng.uniform(0.0, 3.0))
        out = hcl(u, v, tau, beta, validate=False)
        w, _ = check_grad_entries(lambda: hcl(u, v, tau, beta, validate=False).loss,
                                  u, out.d_shape, rng, 20)
        worst = max(worst, w)
        w, _ = check_grad_entries(lambda: hcl(u, v, tau, beta, validate=False).loss,
                                  v, out.d_image, rng, 20)
        worst = max(worst, w)
        log_tau = np.array(math.log(tau))
        w, _ = check_grad_entries(
            lambda: hcl(u, v, float(np.exp(log_tau)), beta, validate=False).loss,
            log_tau.reshape(()), np.array(out.d_log_tau).reshape(()), rng, 1)
        worst = max(worst, w)
    assert worst < 1e-4


def test_hcl_permutation_equivariance():
    rng = np.random.default_rng(16)
    n = 6
    u = random_unit_rows(rng, n, 24)
    v = random_unit_rows(rng, n, 24)
    base = hcl(u, v, 0.09, 1.3)
    perm = rng.permutation(n)
    permuted = hcl(u[perm], v[perm], 0.09, 1.3)
    assert permuted.loss == pytest.approx(base.loss, abs=1e-12)
    assert np.allclose(permuted.d_shape, base.d_shape[perm], atol=1e-12)
    assert np.allclose(permuted.d_image, base.d_image[perm], atol=1e-12)


# -----------------------------------------------------------------------------
# anneal_beta
# -----------------------------------------------------------------------------


def test_anneal_beta_default_ladder():
    schedule = BetaSchedule(total_epochs=100)
    assert anneal_beta(0, schedule) == 0.5
    assert anneal_beta(20, schedule) == 0.4
    assert anneal_beta(99, schedule) == 0.1
    assert schedule.beta0 == 0.5
    assert schedule.n_stages == 5


def test_anneal_beta_remainder_goes_to_last_stage():
    schedule = BetaSchedule(total_epochs=103)
    # blocks of 20; epochs 100..102 fall past stage 4's nominal end
    assert anneal_beta(100, schedule) == 0.1
    assert anneal_beta(102, schedule) == 0.1


def test_anneal_beta_range_checks():
    schedule = BetaSchedule(total_epochs=10)
    with pytest.raises(ParameterError):
        anneal_beta(10, schedule)
    with pytest.raises(ParameterError):
        anneal_beta(-1, schedule)
    with pytest.raises(ParameterError):
        BetaSchedule(total_epochs=0)
