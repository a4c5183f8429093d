import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedseq.privacy import (
    KHarmony,
    Laplace,
    LdpBoundReport,
    Passthrough,
    PerturbedGradientMessage,
    QHarmony,
    UnsupportedMechanismError,
    kharmony_aggregate,
    laplace_mechanism,
    ldp_ratio_check,
    make_mechanism,
    normalize_gradient,
    positive_probability,
    qharmony_client,
    qharmony_server,
    read_messages,
    write_messages,
)


def message(user, triples, f_max):
    values, rows, cols = zip(*triples)
    return PerturbedGradientMessage(
        user_id=user,
        values=np.array(values, dtype=float),
        rows=np.array(rows),
        cols=np.array(cols),
        f_max=f_max,
    )


# --- normalization -----------------------------------------------------------


def test_normalize_divides_by_max_abs():
    F = np.array([[2.0, -4.0], [1.0, 0.0]])
    F_norm, scale = normalize_gradient(F)
    assert scale == 4.0
    np.testing.assert_allclose(F_norm, F / 4.0)
    assert np.abs(F_norm).max() == 1.0


def test_normalize_all_zero():
    F = np.zeros((3, 2))
    F_norm, scale = normalize_gradient(F)
    assert scale == 1.0
    np.testing.assert_array_equal(F_norm, F)


def test_normalize_rejects_nan():
    with pytest.raises(ValueError):
        normalize_gradient(np.array([[np.nan, 0.0]]))


def test_normalize_round_trip():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(5, 3)) * 7
    F_norm, scale = normalize_gradient(F)
    np.testing.assert_allclose(F_norm * scale, F, rtol=1e-12)


# --- perturbation law ----------------------------------------------------------


def test_positive_probability_at_zero_is_half():
    assert positive_probability(0.0, 1.3) == 0.5


def test_positive_probability_at_one():
    t = math.exp(0.7)
    assert positive_probability(1.0, 0.7) == pytest.approx(t / (t + 1), rel=1e-15)


def test_expected_report_closed_form():
    # E[report] = 2 p_plus - 1 = f (t - 1) / (t + 1), exact probabilities
    eps_per_coord = 0.8
    t = math.exp(eps_per_coord)
    for f in (-1.0, -0.5, 0.0, 0.5, 1.0):
        p = positive_probability(f, eps_per_coord)
        expectation = p * 1.0 + (1 - p) * (-1.0)
        assert expectation == pytest.approx(f * (t - 1) / (t + 1), abs=1e-15)


@given(st.floats(-1.0, 1.0), st.floats(0.01, 20.0))
@settings(max_examples=200, deadline=None)
def test_positive_probability_is_a_probability(f, eps_per_coord):
    p = positive_probability(f, eps_per_coord)
    assert 0.0 < p < 1.0


def test_infinite_budget_degenerates_to_quantizer():
    for f in np.linspace(-1, 1, 9):
        assert positive_probability(f, 50.0) == pytest.approx((f + 1) / 2, abs=1e-10)
        assert positive_probability(f, math.inf) == (f + 1) / 2


# --- qharmony client -------------------------------------------------------------


def test_client_message_structure():
    rng = np.random.default_rng(1)
    F_norm = rng.uniform(-1, 1, size=(4, 3))
    msg = qharmony_client(F_norm, eps=2.0, k=5, rng=rng, user_id=9)
    assert msg.k == 5
    assert msg.user_id == 9
    assert set(np.unique(msg.values)) <= {-1.0, 1.0}
    assert len({(r, c) for r, c in zip(msg.rows, msg.cols)}) == 5
    assert msg.f_max == F_norm.max()  # signed maximum


def test_client_rejects_oversized_k():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        qharmony_client(np.zeros((2, 2)), eps=1.0, k=5, rng=rng)


def test_client_rejects_nonpositive_budget():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        qharmony_client(np.zeros((2, 2)), eps=0.0, k=1, rng=rng)


def test_client_deterministic_given_seed():
    F_norm = np.linspace(-1, 1, 12).reshape(4, 3)
    a = qharmony_client(F_norm, 1.5, 4, np.random.default_rng(7))
    b = qharmony_client(F_norm, 1.5, 4, np.random.default_rng(7))
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.rows, b.rows)
    np.testing.assert_array_equal(a.cols, b.cols)


def test_client_empirical_mean_matches_closed_form():
    # single fixed coordinate: k = n*d = 1 so the entry is always selected
    eps_per_coord = 1.1
    t = math.exp(eps_per_coord)
    rng = np.random.default_rng(4)
    f = 0.4
    n_draws = 200_000
    p = positive_probability(f, eps_per_coord)
    draws = np.where(rng.random(n_draws) < p, 1.0, -1.0)
    expected = f * (t - 1) / (t + 1)
    sigma = math.sqrt((1 - expected**2) / n_draws)
    assert abs(draws.mean() - expected) < 4 * sigma


# --- qharmony server --------------------------------------------------------------


def test_server_single_message():
    msg = message(0, [(1.0, 1, 2)], f_max=0.5)
    F_bar = qharmony_server([msg], shape=(3, 4))
    expected = np.zeros((3, 4))
    expected[1, 2] = 0.5
    np.testing.assert_array_equal(F_bar, expected)


def test_server_no_positive_reports_gives_zero():
    msgs = [message(0, [(-1.0, 0, 0)], 0.3), message(1, [(-1.0, 1, 1)], 0.9)]
    np.testing.assert_array_equal(qharmony_server(msgs, (2, 2)), np.zeros((2, 2)))


def test_server_hand_traced_aggregation():
    # three clients on a 2x2 gradient, worked through the accumulation rules
    # by hand: S = [[1, 1], [1, -1]], Z = [[2, 1], [1, 0]], z_max = 2,
    # max f_max = 0.9  ->  F_bar = 0.45 * S
    msgs = [
        message(0, [(1.0, 0, 0), (-1.0, 1, 1)], 0.9),
        message(1, [(1.0, 0, 0), (1.0, 0, 1)], 0.5),
        message(2, [(-1.0, 0, 0), (1.0, 1, 0)], 0.7),
    ]
    F_bar = qharmony_server(msgs, (2, 2))
    np.testing.assert_allclose(F_bar, 0.45 * np.array([[1, 1], [1, -1]]))


def test_server_requires_messages():
    with pytest.raises(ValueError):
        qharmony_server([], (2, 2))


def test_message_size_independent_of_shape():
    rng = np.random.default_rng(5)
    for shape in [(4, 2), (40, 20)]:
        F_norm = rng.uniform(-1, 1, size=shape)
        msg = qharmony_client(F_norm, eps=3.0, k=3, rng=rng)
        assert msg.k == 3  # k triples + one scalar regardless of shape


# --- kharmony ----------------------------------------------------------------------


def enumerate_client_outcomes(F_norm, eps, k):
    """All (probability, message) pairs for one client at k=1."""
    assert k == 1
    n, d = F_norm.shape
    outcomes = []
    for flat in range(n * d):
        row, col = divmod(flat, d)
        p_sel = 1.0 / (n * d)
        p_plus = positive_probability(F_norm[row, col], eps / k)
        for value, p_val in ((1.0, p_plus), (-1.0, 1.0 - p_plus)):
            msg = message(0, [(value, row, col)], float(F_norm.max()))
            outcomes.append((p_sel * p_val, msg))
    return outcomes


def test_kharmony_exact_unbiasedness_two_clients():
    # enumerate every joint outcome of two clients on a 2x2 gradient, k=1
    rng = np.random.default_rng(6)
    eps = 1.7
    grads = [rng.uniform(-1, 1, size=(2, 2)) for _ in range(2)]
    expectation = np.zeros((2, 2))
    for (p1, m1), (p2, m2) in itertools.product(
        enumerate_client_outcomes(grads[0], eps, 1),
        enumerate_client_outcomes(grads[1], eps, 1),
    ):
        expectation += p1 * p2 * kharmony_aggregate([m1, m2], eps, 1, (2, 2))
    np.testing.assert_allclose(expectation, (grads[0] + grads[1]) / 2, atol=1e-12)


def test_kharmony_unbiased_for_every_budget():
    # closed-form expectation per coordinate:
    #   E[agg_ij] = factor * P(select) * f_ij (t-1)/(t+1) = f_ij
    rng = np.random.default_rng(7)
    F_norm = rng.uniform(-1, 1, size=(3, 2))
    for eps in (0.2, 1.0, 4.5, 30.0):
        for k in (1, 2, 5):
            t = math.exp(eps / k)
            factor = (6 / k) * (t + 1) / (t - 1)
            implied = factor * (k / 6) * F_norm * (t - 1) / (t + 1)
            np.testing.assert_allclose(implied, F_norm, atol=1e-12)


def test_kharmony_limit_recovers_value():
    # eps/k -> inf: the debias factor tends to n*d/k and a fully sampled
    # coordinate reports its own sign deterministically for f = 1
    msg = message(0, [(1.0, 0, 0)], 1.0)
    agg = kharmony_aggregate([msg], eps=math.inf, k=1, shape=(1, 1))
    np.testing.assert_allclose(agg, [[1.0]])


# --- laplace -----------------------------------------------------------------------


def test_laplace_infinite_budget_is_identity():
    rng = np.random.default_rng(8)
    F_norm = rng.uniform(-1, 1, size=(4, 2))
    np.testing.assert_array_equal(laplace_mechanism(F_norm, math.inf, rng), F_norm)
    almost = laplace_mechanism(F_norm, 1e12, rng)
    np.testing.assert_allclose(almost, F_norm, atol=1e-9)


def test_laplace_variance_matches_target():
    n, d, eps = 4, 2, 1.0
    rng = np.random.default_rng(9)
    F_norm = np.zeros((n, d))
    draws = np.stack([laplace_mechanism(F_norm, eps, rng) for _ in range(100_000)])
    target = 4.0 * n**2 * d**2 / eps**2
    assert abs(draws.var() - target) / target < 0.05


def test_laplace_mean_unbiased():
    n, d, eps = 3, 2, 2.0
    rng = np.random.default_rng(10)
    F_norm = rng.uniform(-1, 1, size=(n, d))
    draws = np.stack([laplace_mechanism(F_norm, eps, rng) for _ in range(100_000)])
    sigma = math.sqrt(2.0) * n * d / eps * math.sqrt(2)  # per-element std
    tol = 3 * sigma / math.sqrt(draws.shape[0])
    assert np.abs(draws.mean(axis=0) - F_norm).max() < tol


def test_laplace_rejects_nonpositive_budget():
    with pytest.raises(ValueError):
        laplace_mechanism(np.zeros((2, 2)), 0.0, np.random.default_rng(0))


# --- privacy bound -------------------------------------------------------------------


def test_ratio_equals_bound_at_unit_budget():
    report = ldp_ratio_check("qharmony", eps=1.0, k=1)
    assert report.max_ratio == pytest.approx(math.e, abs=1e-12)
    assert report.within_bound


def test_ratio_within_bound_small_budget():
    report = ldp_ratio_check("kharmony", eps=0.1, k=1)
    assert report.max_ratio <= math.exp(0.1) + 1e-12


def test_ratio_identical_inputs_is_one():
    p = positive_probability(0.3, 0.5)
    assert p / p == 1.0


def test_ratio_check_rejects_continuous_mechanisms():
    with pytest.raises(UnsupportedMechanismError):
        ldp_ratio_check("laplace", eps=1.0, k=1)


# --- mechanism objects -----------------------------------------------------------------


def test_passthrough_sums_exactly():
    rng = np.random.default_rng(11)
    mech = Passthrough()
    grads = [rng.normal(size=(3, 2)) for _ in range(4)]
    msgs = [mech.privatize(g, rng) for g in grads]
    np.testing.assert_array_equal(mech.aggregate(msgs, (3, 2)), sum(grads))


def test_mechanism_factory():
    assert make_mechanism("none").name == "none"
    assert make_mechanism("qharmony", 2.0, 3).k == 3
    assert make_mechanism("kharmony", 2.0, 3).epsilon == 2.0
    assert make_mechanism("laplace", 1.5).name == "laplace"
    with pytest.raises(ValueError):
        make_mechanism("qharmony")
    with pytest.raises(ValueError):
        make_mechanism("mystery", 1.0)


def test_qharmony_mechanism_normalizes_internally():
    rng = np.random.default_rng(12)
    mech = QHarmony(epsilon=4.0, k=2)
    grad = rng.normal(size=(4, 3)) * 100
    msg = mech.privatize(grad, np.random.default_rng(0))
    assert -1.0 <= msg.f_max <= 1.0


def test_abs_max_variant_is_opt_in():
    grad = -np.ones((2, 2))  # all-negative: signed max of normalized is -1
    signed = QHarmony(epsilon=2.0, k=1).privatize(grad, np.random.default_rng(1))
    absolute = QHarmony(epsilon=2.0, k=1, use_abs_max=True).privatize(
        grad, np.random.default_rng(1)
    )
    assert signed.f_max == -1.0
    assert absolute.f_max == 1.0


def test_mechanisms_deterministic_given_seed():
    rng = np.random.default_rng(13)
    grad = rng.normal(size=(3, 3))
    for mech in (QHarmony(2.0, 2), KHarmony(2.0, 2), Laplace(1.0), Passthrough()):
        out_a = mech.privatize(grad, np.random.default_rng(42))
        out_b = mech.privatize(grad, np.random.default_rng(42))
        if isinstance(out_a, PerturbedGradientMessage):
            np.testing.assert_array_equal(out_a.values, out_b.values)
            np.testing.assert_array_equal(out_a.rows, out_b.rows)
        else:
            np.testing.assert_array_equal(out_a, out_b)


# --- wire format ---------------------------------------------------------------------


def test_message_log_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    msgs = [
        qharmony_client(rng.uniform(-1, 1, size=(4, 3)), 2.0, 3, rng, user_id=u)
        for u in range(3)
    ]
    path = tmp_path / "messages.log"
    write_messages(path, msgs)
    back = read_messages(path)
    assert len(back) == 3
    for orig, parsed in zip(msgs, back):
        assert parsed.user_id == orig.user_id
        assert parsed.f_max == orig.f_max
        np.testing.assert_array_equal(parsed.values, orig.values)
        np.testing.assert_array_equal(parsed.rows, orig.rows)
        np.testing.assert_array_equal(parsed.cols, orig.cols)
