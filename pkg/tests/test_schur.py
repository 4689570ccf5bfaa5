import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_schur_blocks, min_norm_head_solution, random_admissible_sequence
from strip_spectra.channels import channel_split, spectral_gap
from strip_spectra.model import OperatorModel, PotentialSpec, sample_potential
from strip_spectra.schur import (
    RankDeficientError,
    check_admissible,
    construct_uy,
    find_rank_deficiencies,
    head_steps,
    opnorm,
    rank_matrix,
    rank_scan,
    schur_init,
    schur_run,
    schur_step,
)
from strip_spectra.transfer import AdmissibilityError, transfer_product, truncate_potential


def rel_err(a, b):
    scale = max(np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / scale


def test_init_shapes():
    s = schur_init(3, 1)
    np.testing.assert_array_equal(s.X, np.eye(3))
    assert s.Z.shape == (3, 1) and not s.Z.any()
    assert s.DinvC.shape == (1, 3) and not s.DinvC.any()
    assert s.Dinv_norm_bound == 1.0 and s.n == 0
    e = schur_init(2, 0)
    assert e.Z.shape == (2, 0) and e.DinvC.shape == (0, 2)


def test_init_batched():
    s = schur_init(2, 1, (4, 5))
    assert s.X.shape == (4, 5, 2, 2) and s.log_Dinv_bound.shape == (4, 5)


def test_init_rejects_negative():
    with pytest.raises(ValueError):
        schur_init(-1, 0)


def test_zero_perturbation_step():
    rng = np.random.default_rng(0)
    S, Gamma, T, _ = random_admissible_sequence(rng, 3, 1, 0, 0.5)
    s = schur_init(3, 1)
    X0 = rng.normal(size=(3, 3)) + 0j
    s = type(s)(**{**s.__dict__, "X": X0})
    nxt = schur_step(s, S, Gamma, np.zeros((4, 4)), gap=0.5)
    np.testing.assert_array_equal(nxt.Z, 0)
    np.testing.assert_array_equal(nxt.DinvC, 0)
    np.testing.assert_allclose(nxt.X, S @ X0)
    assert nxt.n == 1


def test_step_rejects_before_update():
    rng = np.random.default_rng(1)
    S, Gamma, _, _ = random_admissible_sequence(rng, 2, 1, 0, 0.5)
    W = np.eye(3)
    with pytest.raises(AdmissibilityError, match=r"\|W\|"):
        schur_step(schur_init(2, 1), S, Gamma, W, gap=0.5)
    with pytest.raises(AdmissibilityError, match="Gamma"):
        check_admissible(S, np.eye(1), np.zeros((3, 3)), 0.5)
    with pytest.raises(AdmissibilityError, match=r"\|S\|"):
        check_admissible(3 * S, Gamma, np.zeros((3, 3)), 0.5)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    l0=st.integers(1, 4),
    l1=st.integers(0, 2),
    length=st.integers(1, 25),
    gap=st.floats(0.1, 1.0),
)
def test_recursion_matches_high_precision_blocks(seed, l0, l1, length, gap):
    rng = np.random.default_rng(seed)
    S, Gamma, T, Ws = random_admissible_sequence(rng, l0, l1, length, gap)
    state = schur_init(l0, l1)
    for W in Ws:
        state = schur_step(state, S, Gamma, W, gap=gap)
        assert opnorm(state.Z) <= 1 + 1e-12
    X, Z, DinvC, Dinv = dense_schur_blocks(T, Ws, l0)
    assert rel_err(state.X, X) <= 1e-8
    if l1:
        assert rel_err(state.Z, Z) <= 1e-8
        assert rel_err(state.DinvC, DinvC) <= 1e-8
        assert rel_err(state.Dinv_true, Dinv) <= 1e-8
        rho = (math.exp(2 * gap) + math.exp(gap)) / 2
        assert state.log_Dinv_bound <= -length * math.log(rho) + 1e-9
        assert state.log_Dinv_norm() <= state.log_Dinv_bound + 1e-12


def test_block_tuple_equals_full_matrix():
    rng = np.random.default_rng(5)
    S, Gamma, _, Ws = random_admissible_sequence(rng, 3, 2, 4, 0.4)
    a = b = schur_init(3, 2)
    for W in Ws:
        a = schur_step(a, S, Gamma, W)
        b = schur_step(b, S, Gamma, (W[:3, :3], W[:3, 3:], W[3:, :3], W[3:, 3:]))
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.DinvC, b.DinvC)


def decaying_model(sigma=1.0, alpha=(0.0, 5.0)):
    return OperatorModel(
        l=len(alpha), alpha=list(alpha), potential=PotentialSpec(kind="hermitian-gaussian", sigma=sigma, p=1.0)
    )


def test_run_zero_potential():
    model = OperatorModel(l=2, alpha=[0.0, 5.0])
    sample = sample_potential(model, 50, seed=0)
    window = spectral_gap(model, 0.5, 1.5)
    run = schur_run(model, sample, 0, 49, 1.0, window=window)
    assert not run.Y.any() and run.certificate == 0
    assert len(run.trajectory) == 51
    np.testing.assert_array_equal(run.final.Z, 0)


def test_run_decaying_converges():
    model = decaying_model(0.3)
    window = spectral_gap(model, 0.8, 1.2)
    sample = sample_potential(model, 801, seed=4)
    hat, m_star = truncate_potential(sample, window)
    m = max(m_star, 1)
    run = schur_run(model, hat, m, 800, 1.0, window=window)
    z_norms = [float(opnorm(s.Z)) for s in run.trajectory[1:]]
    assert max(z_norms) <= 1 + 1e-12
    assert z_norms[-1] < 0.05 * max(z_norms)
    increments = [
        float(opnorm(b.DinvC - a.DinvC)) for a, b in zip(run.trajectory[1:], run.trajectory[2:])
    ]
    assert sum(increments[400:]) < 1e-3 * max(sum(increments), 1e-300) + 1e-12
    assert run.certificate <= 1e-6 * max(1.0, float(opnorm(run.Y)))


def test_run_checkpoints():
    model = decaying_model(0.3)
    window = spectral_gap(model, 0.8, 1.2)
    hat, m_star = truncate_potential(sample_potential(model, 100, seed=1), window)
    full = schur_run(model, hat, m_star, 99, 1.0, window=window)
    cp = schur_run(model, hat, m_star, 99, 1.0, window=window, keep="checkpoints", checkpoints=(m_star + 9, 50))
    assert [s.n for s in cp.trajectory] == [10, 50 - m_star + 1, 100 - m_star]
    np.testing.assert_array_equal(cp.trajectory[0].X, full.trajectory[10].X)
    np.testing.assert_array_equal(cp.Y, full.Y)


def test_run_reports_inadmissible_site():
    model = decaying_model(5.0)
    window = spectral_gap(model, 0.8, 1.2)
    sample = sample_potential(model, 20, seed=0)
    with pytest.raises(AdmissibilityError) as info:
        schur_run(model, sample, 0, 19, 1.0, window=window)
    assert info.value.site is not None and 0 <= info.value.site < 20


def test_run_batched_matches_scalar():
    model = decaying_model(0.3)
    window = spectral_gap(model, 0.8, 1.2)
    hat, m_star = truncate_potential(sample_potential(model, 60, seed=2), window)
    zs = np.array([0.85, 1.0 + 0.01j, 1.15])
    batch = schur_run(model, hat, m_star, 59, None, channel_split(model, zs, window=window))
    for i, z in enumerate(zs):
        single = schur_run(model, hat, m_star, 59, z, window=window)
        np.testing.assert_allclose(batch.Y[i], single.Y, rtol=1e-12, atol=1e-15)


def test_y_decreases_with_m():
    model = decaying_model(0.3)
    window = spectral_gap(model, 0.8, 1.2)
    hat, m_star = truncate_potential(sample_potential(model, 1000, seed=9), window)
    zs = np.linspace(0.8, 1.2, 9).astype(complex)
    split = channel_split(model, zs, window=window)
    sups = []
    for m in (max(m_star, 1), 100, 300, 600):
        run = schur_run(model, hat, m, 999, None, split, keep="checkpoints")
        sups.append(float(opnorm(run.Y).max()))
    assert sups[-1] < sups[0]
    assert sups[-1] < 0.5 * sups[0]


def test_rank_matrix_without_hyperbolic():
    model = OperatorModel(l=1, alpha=[0.0])
    split = channel_split(model, 0.3)
    A, diag = rank_matrix(np.zeros((0, 2)), split)
    assert A.shape == (0, 1) and diag.rank_full


def test_rank_matrix_degenerate_head():
    model = OperatorModel(l=2, alpha=[0.0, 5.0])
    split = channel_split(model, 1.0)
    A, diag = rank_matrix(np.zeros((1, 3)), split, split.Q)
    # Qinv Q = I, so A is the last l_h rows of (I_l; 0)
    np.testing.assert_allclose(A, np.zeros((1, 2)), atol=1e-15)
    assert not diag.rank_full


def test_rank_full_off_axis():
    model = decaying_model(0.3)
    window = spectral_gap(model, 0.8, 1.2)
    hat, _ = truncate_potential(sample_potential(model, 200, seed=3), window)
    split = channel_split(model, 1.0 + 0.05j, window=window)
    run = schur_run(model, hat, 5, 199, None, split)
    head = transfer_product(model, hat, 0, 4, split.z)
    _, diag = rank_matrix(run.Y, split, head)
    assert diag.rank_full and diag.smin > 1e-8 * diag.smax


@pytest.mark.parametrize("z", [1.0, 1.1 + 0.02j])
def test_construct_uy_reproduces_transfer(z):
    # hyperbolic growth amplifies rounding in the dense product, so the oracle
    # is only meaningful for short head and tail lengths
    model = decaying_model(0.05)
    window = spectral_gap(model, 0.8, 1.2)
    hat, m_star = truncate_potential(sample_potential(model, 40, seed=6), window)
    m = max(m_star, 3)
    n = m + 10
    split = channel_split(model, z, window=window)
    run = schur_run(model, hat, m, n, None, split)
    head = transfer_product(model, hat, 0, m - 1, split.z)
    x = np.array([1.0, 0.3])
    u, y = construct_uy(x, run.Y, split, head)
    vec = split.Qinv @ head.matrix() @ np.concatenate([u, x])
    np.testing.assert_allclose(vec[3:], -run.Y @ vec[:3], atol=1e-12 * np.linalg.norm(vec))
    np.testing.assert_allclose(vec[:3], y, atol=1e-12 * np.linalg.norm(vec))
    direct = transfer_product(model, hat, 0, n, split.z).matrix() @ np.concatenate([u, x])
    via_schur = split.Q @ np.concatenate([run.final.X @ y, np.zeros(1)])
    assert rel_err(via_schur, direct) <= 1e-7


@pytest.mark.parametrize("z", [1.0, 1.1 + 0.02j])
def test_head_steps_agree_with_explicit_head_when_short(z):
    model = decaying_model(0.05)
    window = spectral_gap(model, 0.8, 1.2)
    sample = sample_potential(model, 40, seed=6)
    hat, m_star = truncate_potential(sample, window)
    m = max(m_star, 3)
    split = channel_split(model, z, window=window)
    run = schur_run(model, hat, m, m + 10, None, split)
    x = np.array([1.0, 0.3])
    u_explicit, y_explicit = construct_uy(x, run.Y, split, transfer_product(model, sample, 0, m - 1, split.z))
    steps = head_steps(model, sample, m, split.z)
    u, y = construct_uy(x, run.Y, split, steps)
    np.testing.assert_allclose(u, u_explicit, atol=1e-10 * np.linalg.norm(u))
    np.testing.assert_allclose(y, y_explicit, rtol=1e-9)
    A_explicit, _ = rank_matrix(run.Y, split, transfer_product(model, sample, 0, m - 1, split.z))
    A, diag = rank_matrix(run.Y, split, steps)
    # one hyperbolic row: the stable A is the explicit one rescaled to a unit constraint row
    ratio = A / A_explicit
    np.testing.assert_allclose(ratio, ratio[0, 0], rtol=1e-9)
    assert diag.smax == 1.0 and diag.rank_full


def test_head_steps_match_product():
    model = decaying_model(0.5)
    sample = sample_potential(model, 10, seed=1)
    z = np.array([0.9, 1.1 + 0.1j])
    steps = head_steps(model, sample, 4, z)
    assert steps.m == 4 and steps.matrices.shape == (4, 2, 4, 4)
    for i, zi in enumerate(z):
        prod = np.eye(4)
        for k in range(4):
            prod = steps.matrices[k, i] @ prod
        np.testing.assert_allclose(prod, transfer_product(model, sample, 0, 3, zi).matrix(), rtol=1e-13)
    assert head_steps(model, sample, 0, 1.0).m == 0
    with pytest.raises(IndexError):
        head_steps(model, sample, 11, 1.0)


def test_long_head_matches_high_precision_oracle():
    # a head of 27 sites grows by ~e^28: the explicit product loses y entirely
    model = OperatorModel(
        l=2, alpha=[0.0, 5.0], potential=PotentialSpec(kind="hermitian-gaussian", sigma=0.25, p=1.0)
    )
    window = spectral_gap(model, 0.6, 1.4)
    sample = sample_potential(model, 101, seed=1015)
    hat, m_star = truncate_potential(sample, window)
    assert m_star >= 25
    lam = 0.648
    split = channel_split(model, complex(lam), window=window)
    run = schur_run(model, hat, m_star, 100, None, split, keep="checkpoints")
    x = np.array([1.0, 0.5]) / math.sqrt(1.25)
    steps = head_steps(model, sample, m_star, complex(lam))
    u, y = construct_uy(x, run.Y, split, steps)
    u_ref, y_ref = min_norm_head_solution(run.Y, split.Q, steps.matrices, x)
    np.testing.assert_allclose(u, u_ref, atol=1e-10 * np.linalg.norm(u_ref))
    np.testing.assert_allclose(y, y_ref, atol=1e-10 * np.linalg.norm(y_ref))


def test_two_hyperbolic_rates_stay_full_rank():
    # decay rates differ between the two hyperbolic channels, so the explicit
    # product's second row is resolved only to (gamma_2 / gamma_1)^m
    model = OperatorModel(l=3, alpha=[0.0, 5.0, 9.0])
    sample = sample_potential(model, 60, seed=0)
    split = channel_split(model, 1.0)
    assert split.l_h == 2
    Y = np.zeros((2, 4), dtype=complex)
    _, explicit = rank_matrix(Y, split, transfer_product(model, sample, 0, 39, 1.0))
    _, stable = rank_matrix(Y, split, head_steps(model, sample, 40, 1.0))
    assert not explicit.rank_full
    assert stable.rank_full and stable.smin > 0.1


def test_construct_uy_without_hyperbolic():
    model = OperatorModel(l=1, alpha=[0.0], potential=PotentialSpec(kind="diagonal-iid", sigma=0.1))
    split = channel_split(model, 0.2)
    u, y = construct_uy(np.array([1.0]), np.zeros((0, 2)), split)
    np.testing.assert_array_equal(u, [0])
    np.testing.assert_allclose(y, split.Qinv[:, 1:] @ [1.0])


def test_construct_uy_rank_deficient():
    model = OperatorModel(l=2, alpha=[0.0, 5.0])
    split = channel_split(model, 1.0)
    with pytest.raises(RankDeficientError) as info:
        construct_uy(np.array([1.0, 0.0]), np.zeros((1, 3)), split, split.Q)
    assert not info.value.diagnostic.rank_full


def test_rank_scan_zero_potential_has_no_deficiency():
    model = OperatorModel(l=2, alpha=[0.0, 5.0])
    sample = sample_potential(model, 30, seed=0)
    grid, smin = rank_scan(model, sample, 2, 0.5, 1.5, 51)
    assert grid.shape == smin.shape == (51,)
    assert np.all(smin > 1e-3) and np.all(smin <= 1 + 1e-12)
    assert find_rank_deficiencies(model, sample, 2, 0.5, 1.5, 51) == []


def test_rank_scan_no_hyperbolic_channel():
    model = OperatorModel(l=1, alpha=[0.0], potential=PotentialSpec(kind="diagonal-iid", sigma=0.2))
    sample = sample_potential(model, 200, seed=0)
    window = spectral_gap(model, -1.0, 1.0)
    _, m_star = truncate_potential(sample, window)
    assert find_rank_deficiencies(model, sample, m_star + 1, -1.0, 1.0, 41, window=window) == []


def test_rank_scan_rejects_m_below_truncation():
    model = decaying_model(3.0)
    sample = sample_potential(model, 100, seed=0)
    window = spectral_gap(model, 0.8, 1.2)
    _, m_star = truncate_potential(sample, window)
    assert m_star > 0
    with pytest.raises(ValueError, match="m\\*"):
        rank_scan(model, sample, m_star - 1, 0.8, 1.2, 11, window=window)
