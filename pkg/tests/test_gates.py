"""Gate distribution tests: sampling, closed-form sparsity, binarization.

The closed form is validated two independent ways: against a Monte-Carlo
zero-fraction of the sampling path, and against the float64 oracle formula.
"""
import numpy as np
import pytest

import oracles
from depthgate.errors import ConfigError, ContractError
from depthgate.gates import (BETA, STRETCH_HIGH, STRETCH_LOW, GateParams,
                             MaskCandidate, binarize, draw_uniform,
                             expected_sparsity, expected_sparsity_t,
                             sample_soft_mask, soft_mask_from_uniform)
from depthgate.tensor import Tensor


def test_median_noise_identity_gate():
    # u = 0.5 makes the noise term vanish; log_alpha 0 gives exactly 0.5.
    z = soft_mask_from_uniform(Tensor(np.zeros(1, dtype=np.float32)),
                               np.array([0.5]))
    assert abs(z.data[0] - 0.5) < 1e-6


def test_saturated_gate_clips_to_one():
    z = soft_mask_from_uniform(Tensor(np.full(1, 10.0, dtype=np.float32)),
                               np.array([0.5]))
    assert z.data[0] == 1.0


def test_samples_stay_in_unit_interval_with_exact_endpoints():
    gate = GateParams.create(8, init_log_alpha=0.0)
    rng = np.random.default_rng(0)
    hits0 = hits1 = 0
    for _ in range(200):
        z = sample_soft_mask(gate, rng).data
        assert np.all(z >= 0.0) and np.all(z <= 1.0)
        hits0 += int(np.any(z == 0.0))
        hits1 += int(np.any(z == 1.0))
    assert hits0 > 0 and hits1 > 0


@pytest.mark.parametrize("log_alpha", [-2.0, 0.0, 2.0])
def test_monte_carlo_matches_closed_form(log_alpha):
    n = 200_000
    rng = np.random.default_rng(12)
    gate = GateParams.create(1, init_log_alpha=log_alpha)
    u = draw_uniform(rng, n)
    z = soft_mask_from_uniform(
        Tensor(np.full(n, log_alpha, dtype=np.float32)), u).data
    mc = float(np.mean(z == 0.0))
    p = expected_sparsity(gate.log_alpha.data)
    se = np.sqrt(p * (1 - p) / n)
    assert abs(mc - p) < 3 * se


def test_closed_form_values():
    assert abs(expected_sparsity(np.zeros(4)) - 0.0266789) < 1e-6
    assert expected_sparsity(np.full(4, 20.0)) < 1e-6
    half = np.array([20.0, 20.0, -20.0, -20.0])
    assert abs(expected_sparsity(half) - 0.5) < 1e-6
    # Agreement with the independent float64 oracle on a grid.
    la = np.linspace(-4, 4, 33)
    want = oracles.ref_expected_zero_frac(la, BETA, STRETCH_LOW, STRETCH_HIGH)
    assert abs(expected_sparsity(la) - want) < 1e-12


def test_closed_form_monotone_in_log_alpha():
    la = np.linspace(-6, 6, 200)
    p = [expected_sparsity(np.array([v])) for v in la]
    assert all(a >= b for a, b in zip(p, p[1:]))


def test_tape_variant_matches_closed_form():
    rng = np.random.default_rng(1)
    la = rng.uniform(-3, 3, size=8).astype(np.float32)
    t = expected_sparsity_t(Tensor(la))
    assert abs(t.item() - expected_sparsity(la)) < 1e-6


def test_tape_variant_gradient():
    rng = np.random.default_rng(2)
    la = rng.uniform(-2, 2, size=6)
    t = Tensor(la.astype(np.float32), requires_grad=True)
    expected_sparsity_t(t).backward()
    want = oracles.fd_grad(
        lambda x: oracles.ref_expected_zero_frac(x, BETA, STRETCH_LOW,
                                                 STRETCH_HIGH), la)
    assert oracles.rel_err(t.grad, want) < 1e-4


def test_sampling_gradient_against_oracle():
    # Interior gates (u = 0.5, moderate log_alpha) so FD crosses no clip kink.
    rng = np.random.default_rng(3)
    la = rng.uniform(-1.0, 1.0, size=6)
    u = np.full(6, 0.5)
    c = rng.standard_normal(6)
    t = Tensor(la.astype(np.float32), requires_grad=True)
    (soft_mask_from_uniform(t, u) * c).sum().backward()
    want = oracles.fd_grad(
        lambda x: float((oracles.ref_hard_concrete(
            x, u, BETA, STRETCH_LOW, STRETCH_HIGH) * c).sum()), la)
    assert oracles.rel_err(t.grad, want) < 1e-4


def test_clipped_gate_gets_zero_gradient():
    t = Tensor(np.array([10.0, 0.0], dtype=np.float32), requires_grad=True)
    soft_mask_from_uniform(t, np.array([0.5, 0.5])).sum().backward()
    assert t.grad[0] == 0.0
    assert t.grad[1] != 0.0


def test_sampling_deterministic_under_seeded_stream():
    gate = GateParams.create(8)
    a = sample_soft_mask(gate, np.random.default_rng(77)).data
    b = sample_soft_mask(gate, np.random.default_rng(77)).data
    assert np.array_equal(a, b)


def test_binarize_exact_zero_count():
    rng = np.random.default_rng(4)
    la = rng.standard_normal(8)
    mask = binarize(la, 0.25)
    assert mask.sum() == 6
    # The two smallest log_alpha entries are the zeros.
    zero_idx = set(np.where(mask == 0)[0])
    assert zero_idx == set(np.argsort(la)[:2])


def test_binarize_tie_break_zeroes_higher_indices():
    mask = binarize(np.zeros(4), 0.5)
    assert mask.tolist() == [1, 1, 0, 0]


def test_binarize_rounds_half_up():
    assert (binarize(np.arange(4.0), 0.375) == 0).sum() == 2  # 1.5 -> 2
    assert (binarize(np.arange(4.0), 0.3) == 0).sum() == 1    # 1.2 -> 1


def test_binarize_zero_target_all_open():
    assert binarize(np.random.default_rng(5).standard_normal(6), 0.0).tolist() \
        == [1] * 6


def test_binarize_validation():
    with pytest.raises(ContractError):
        binarize(np.zeros(4), 1.0)
    with pytest.raises(ContractError):
        binarize(np.zeros(4), -0.1)
    with pytest.raises(ContractError):
        binarize(np.zeros((2, 2)), 0.5)


def test_binarize_deterministic():
    la = np.random.default_rng(6).standard_normal(10)
    assert np.array_equal(binarize(la, 0.3), binarize(la, 0.3))


def test_gate_params_validation():
    with pytest.raises(ConfigError):
        GateParams.create(0)
    with pytest.raises(ConfigError):
        GateParams.create(4, stretch_low=0.1)
    with pytest.raises(ConfigError):
        GateParams.create(4, stretch_high=0.9)
    with pytest.raises(ConfigError):
        GateParams.create(4, beta=0.0)
    with pytest.raises(ConfigError):
        GateParams.create(4, epsilon=0.6)
    with pytest.raises(ConfigError):
        GateParams(log_alpha=Tensor(np.full(3, np.inf, dtype=np.float32)))
    with pytest.raises(ConfigError):
        GateParams(log_alpha=Tensor(np.zeros((2, 2), dtype=np.float32)))


def test_mask_candidate_consistency():
    cand = MaskCandidate(cluster_id=0, centroid=np.zeros(4),
                         log_alpha=np.array([1.0, -1.0, 2.0, 3.0]),
                         binary_mask=np.array([1, 0, 1, 1]))
    assert cand.achieved_sparsity == 0.25
    with pytest.raises(ContractError):
        MaskCandidate(0, np.zeros(4), np.zeros(4),
                      np.array([1, 2, 1, 1]))
    with pytest.raises(ContractError):
        MaskCandidate(0, np.zeros(4), np.zeros(4),
                      np.array([1, 0, 1, 1]), achieved_sparsity=0.5)
