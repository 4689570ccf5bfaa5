import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strip_spectra.channels import (
    Channel,
    ChannelError,
    band_structure,
    channel_split,
    classify_channels,
    free_transfer,
    spectral_gap,
    w_bound,
)
from strip_spectra.model import OperatorModel


def model_of(alpha):
    return OperatorModel(l=len(alpha), alpha=alpha)


def test_bands_single_channel():
    b = band_structure(model_of([0.0]))
    assert b.bands == [(-2.0, 2.0)]
    assert b.sigma == [(-2.0, 2.0)]
    assert b.sigma0 == (-2.0, 2.0)


def test_bands_disjoint():
    b = band_structure(model_of([0.0, 5.0]))
    assert b.sigma == [(-2.0, 2.0), (3.0, 7.0)]
    assert b.sigma0 is None


def test_bands_overlapping():
    b = band_structure(model_of([0.0, 1.0]))
    assert b.sigma == [(-2.0, -1.0), (-1.0, 2.0), (2.0, 3.0)]
    assert b.sigma0 == (-1.0, 2.0)
    assert b.to_dict()["sigma0"] == [-1.0, 2.0]


def interval_oracle(alpha, lam):
    in_band = any(abs(lam - a) < 2 for a in alpha)
    on_edge = any(abs(abs(lam - a) - 2) < 1e-12 for a in alpha)
    return in_band and not on_edge


@settings(max_examples=40, deadline=None)
@given(alpha=st.lists(st.floats(-6, 6, allow_nan=False), min_size=1, max_size=4), probe=st.floats(-9, 9))
def test_sigma_membership_matches_interval_oracle(alpha, probe):
    b = band_structure(model_of(alpha))
    assert b.contains(probe) == interval_oracle(alpha, probe)
    lo, hi = max(alpha) - 2, min(alpha) + 2
    if b.sigma0 is not None:
        assert b.sigma0 == (lo, hi)
    else:
        assert lo >= hi
    # closure of sigma equals union of bands
    covered = sum(h - l for l, h in b.sigma)
    union = sorted(b.bands)
    total, cur_lo, cur_hi = 0.0, *union[0]
    for lo2, hi2 in union[1:]:
        if lo2 > cur_hi:
            total += cur_hi - cur_lo
            cur_lo, cur_hi = lo2, hi2
        else:
            cur_hi = max(cur_hi, hi2)
    total += cur_hi - cur_lo
    assert covered == pytest.approx(total, abs=1e-12)


@pytest.mark.parametrize(
    "alpha, lam, expected",
    [
        ([0, 5], 1, [Channel.ELLIPTIC, Channel.HYPERBOLIC]),
        ([0], 2, [Channel.PARABOLIC]),
        ([0, 1, 6], 0.5, [Channel.ELLIPTIC, Channel.ELLIPTIC, Channel.HYPERBOLIC]),
    ],
)
def test_classify_examples(alpha, lam, expected):
    assert classify_channels(model_of(alpha), lam) == expected


@settings(max_examples=40, deadline=None)
@given(alpha=st.lists(st.floats(-5, 5), min_size=1, max_size=4), lam=st.floats(-8, 8), shift=st.integers(-10, 10))
def test_classify_shift_invariant(alpha, lam, shift):
    a = model_of(alpha)
    b = model_of([x + shift for x in alpha])
    assert classify_channels(a, lam) == classify_channels(b, lam + shift)


def test_split_free_scalar():
    s = channel_split(model_of([0.0]), 0.0)
    assert (s.l_e, s.l_h) == (1, 0)
    assert s.k[0] == pytest.approx(math.pi / 2)
    np.testing.assert_allclose(np.exp(1j * s.K), [[1j]], atol=1e-15)
    np.testing.assert_allclose(s.Q, [[1j, -1j], [1, 1]], atol=1e-15)


def test_split_closed_form_multiplier():
    s = channel_split(model_of([0.0, 5.0]), 1.0)
    assert s.k[0] == pytest.approx(2 * math.pi / 3, abs=1e-15)
    assert s.gamma[0].real == pytest.approx(2 + math.sqrt(3), abs=1e-14)
    assert abs(s.gamma[0].imag) < 1e-15


def test_parabolic_is_rejected():
    with pytest.raises(ChannelError, match="parabolic"):
        channel_split(model_of([0.0]), 2.0)


def test_outside_all_bands_is_rejected():
    with pytest.raises(ChannelError):
        channel_split(model_of([0.0]), 3.0)


random_z_models = st.tuples(
    st.integers(0, 2**32 - 1), st.integers(1, 4), st.floats(-0.4, 0.4)
)


def random_model_and_z(seed, l, eta):
    rng = np.random.default_rng(seed)
    alpha = np.sort(rng.uniform(-4, 4, l))
    while True:
        lam = rng.uniform(alpha[0] - 1.9, alpha[0] + 1.9)
        if np.min(np.abs(np.abs(alpha - lam) - 2)) > 0.05:
            return model_of(alpha), complex(lam, eta)


@settings(max_examples=60, deadline=None)
@given(random_z_models)
def test_split_invariants(params):
    model, z = random_model_and_z(*params)
    s = channel_split(model, z)
    w = model.alpha[s.perm] - z
    np.testing.assert_allclose(2 * np.cos(s.k), w[: s.l_e], atol=1e-12)
    np.testing.assert_allclose(s.gamma + 1 / s.gamma, w[s.l_e:], atol=1e-12)
    assert np.all(np.abs(s.gamma) > 1)
    np.testing.assert_allclose(s.gamma * (1 / s.gamma), 1, atol=1e-15)
    eye = np.eye(2 * model.l)
    assert np.abs(s.Q @ s.Qinv - eye).max() <= 1e-10
    conj = s.Qinv @ free_transfer(model, z) @ s.Q
    assert np.abs(conj - np.diag(s.diagonal)).max() <= 1e-10
    if z.imag == 0:
        assert np.all((s.k.real > 0) & (s.k.real < math.pi))


def test_batched_split_matches_scalar():
    model = model_of([0.0, 1.0, 6.0])
    zs = np.array([0.3 + 0.1j, 0.5, 0.7 - 0.2j])
    batch = channel_split(model, zs)
    for i, z in enumerate(zs):
        single = channel_split(model, z)
        np.testing.assert_allclose(batch.Q[i], single.Q, atol=1e-15)
        np.testing.assert_allclose(batch.Qinv[i], single.Qinv, atol=1e-15)


def test_branch_continuity_along_path():
    model = model_of([0.0, 1.0, 6.0])
    t = np.linspace(0, 1, 2001)
    path = 0.2 + 0.6 * t + 0.3j * np.sin(2 * math.pi * t)
    s = channel_split(model, path)
    dz = np.abs(np.diff(path))
    for values in (s.k, s.gamma):
        jumps = np.abs(np.diff(values, axis=0)).max(axis=1)
        # k and gamma are analytic with derivatives below 5 on this path
        assert np.all(jumps <= 10 * 5 * dz)


def test_gap_example():
    est = spectral_gap(model_of([0.0, 5.0]), 0.5, 1.5)
    lam = np.linspace(0.5, 1.5, 1001)
    # gamma solves gamma + 1/gamma = 5 - lambda; |gamma| is smallest at lambda = 1.5
    log_min = math.log(np.min(np.abs(((5 - lam) + np.sqrt((5 - lam) ** 2 - 4)) / 2)))
    assert est.gap <= 0.5 * log_min
    assert est.gap >= 0.5 * log_min * 0.99
    assert 0 < est.height
    assert (est.l_e, est.l_h) == (1, 1)
    gap_at_one = channel_split(model_of([0.0, 5.0]), 1.0)
    assert 0.5 * math.log(abs(gap_at_one.gamma[0])) == pytest.approx(0.6584789, abs=1e-6)


def test_gap_bounds_hold_on_window():
    model = model_of([0.0, 5.0])
    est = spectral_gap(model, 0.5, 1.5)
    lam = np.linspace(0.5, 1.5, 101)
    eta = np.linspace(-est.height, est.height, 31)
    zs = (lam[None, :] + 1j * eta[:, None]).ravel()
    s = channel_split(model, zs, window=est)
    assert np.all(np.abs(1 / s.gamma) <= math.exp(-2 * est.gap))
    assert np.all(np.abs(np.exp(1j * s.k)) <= math.exp(est.gap))
    assert np.all(np.abs(np.exp(-1j * s.k)) <= math.exp(est.gap))
    norms = np.linalg.norm(s.Q, 2, axis=(1, 2))
    assert norms.max() <= est.CQ


def test_gap_without_hyperbolic_channel():
    est = spectral_gap(model_of([0.0]), -1.0, 1.0)
    assert est.l_h == 0 and est.gap > 0 and math.isfinite(est.CQ)
    s = channel_split(model_of([0.0]), 0.0, window=est)
    assert s.Gamma.shape == (0, 0)


def test_real_axis_elliptic_unimodular():
    s = channel_split(model_of([0.0, 1.0]), np.linspace(-0.5, 1.5, 9))
    np.testing.assert_allclose(np.abs(np.exp(1j * s.k)), 1, atol=1e-14)


def test_gap_rejects_band_edge():
    with pytest.raises(ChannelError, match="band edge"):
        spectral_gap(model_of([0.0, 5.0]), 1.5, 3.5)


def test_threshold_formula():
    est = spectral_gap(model_of([0.0, 5.0]), 0.95, 1.05)
    g = est.gap
    assert est.threshold == pytest.approx((math.exp(2 * g) - math.exp(g)) / (4 * est.CQ**2), rel=1e-15)
    assert w_bound(g) == pytest.approx((math.exp(2 * g) - math.exp(g)) / 4, rel=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_window_CQ_matches_svd_norms(seed):
    rng = np.random.default_rng(seed)
    l = int(rng.integers(1, 5))
    model = OperatorModel(l=l, alpha=np.sort(rng.uniform(-4, 4, l)))
    a = rng.uniform(-6, 6)
    try:
        window = spectral_gap(model, a, a + rng.uniform(0.05, 0.5))
    except ChannelError:
        return
    zs = np.linspace(window.a, window.b, 1001)[None, :] + 1j * np.linspace(-window.height, window.height, 21)[:, None]
    split = channel_split(model, zs.ravel(), window=window)
    ref = max(np.linalg.norm(split.Q, 2, axis=(-2, -1)).max(), np.linalg.norm(split.Qinv, 2, axis=(-2, -1)).max())
    # boundary sampling may miss the interior grid's max only by discretisation error
    assert ref * (1 - 1e-6) <= window.CQ / 1.01 <= ref * (1 + 1e-3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_window_bounds_hold_at_interior_points(seed):
    # the window is verified on the rectangle boundary only
    rng = np.random.default_rng(seed)
    l = int(rng.integers(1, 5))
    model = OperatorModel(l=l, alpha=np.sort(rng.uniform(-4, 4, l)))
    a = rng.uniform(-6, 6)
    try:
        window = spectral_gap(model, a, a + rng.uniform(0.05, 0.5))
    except ChannelError:
        return
    z = rng.uniform(window.a, window.b, 500) + 1j * rng.uniform(-window.height, window.height, 500)
    split = channel_split(model, z, window=window)
    if split.l_h:
        assert np.abs(1 / split.gamma).max() <= math.exp(-2 * window.gap)
    assert np.abs(split.k.imag).max(initial=0) <= window.gap
    assert np.linalg.norm(split.Q, 2, axis=(-2, -1)).max() <= window.CQ
    assert np.linalg.norm(split.Qinv, 2, axis=(-2, -1)).max() <= window.CQ
