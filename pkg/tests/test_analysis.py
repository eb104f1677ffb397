import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from derandprg.analysis import (DistributionTable, WeightVector, affine_structure, binomial_sum_distribution,
                                clopper_pearson, cosine_corpus, cosine_product_approx, CosineApproxInstance,
                                empirical_sum_table, exact_sum_distribution, fit_cosine_constant, fourier_coeff,
                                fourier_grid, fourier_to_tv_bound, fourier_tv_certificate, hv_statistic,
                                linear_sum_distribution, log_cos_coeff, log_cos_rational, moment_probe,
                                reduce_alpha, tail_probability, tv_distance, tv_distance_exact)
from derandprg.core import all_seeds, bits_to_signs
from derandprg.errors import ConfigurationError
from derandprg.hashing import KwiseFamily, SmallBiasFamily, combined_bits, eps_biased_bits, kwise_bits
from conftest import brute_law

signed_vec = st.lists(st.sampled_from([-1, 0, 1]), min_size=1, max_size=12)


def test_weight_vector_norms():
    v = WeightVector([3, -4, 0])
    assert (v.l0, v.l1, v.l2) == (2, 7, 5)
    assert v.l4 == pytest.approx((81 + 256) ** 0.25)
    assert not v.signed and WeightVector([1, 0, -1]).signed


def test_random_signed_density(rng):
    v = WeightVector.random_signed(50, 17, rng)
    assert v.l0 == 17 and v.signed


def test_exact_sum_examples():
    t = exact_sum_distribution([1])
    assert t.support.tolist() == [-1, 1] and t.exact == (Fraction(1, 2), Fraction(1, 2))
    t = exact_sum_distribution([1, 1])
    assert t.exact == (Fraction(1, 4), Fraction(1, 2), Fraction(1, 4))


@given(signed_vec)
def test_all_agree_event(v):
    k = sum(1 for x in v if x)
    t = exact_sum_distribution(v)
    assert t.prob(lambda s: s == k) == 2.0 ** -k


@given(st.lists(st.floats(-3, 3, allow_nan=False).map(lambda x: round(x, 3)), min_size=1, max_size=10))
def test_exact_sum_matches_enumeration(v):
    t = exact_sum_distribution(v)
    xs = bits_to_signs(all_seeds(len(v))).astype(float)
    want = brute_law(np.round(xs @ np.array(v), 9))
    got = {}
    for k, m in zip(np.round(t.support, 9), t.exact):
        got[float(k)] = got.get(float(k), 0) + m
    assert got == {float(k): Fraction(x, 2 ** len(v)) for k, x in want.items()}
    assert sum(t.exact) == 1


def test_tv_examples():
    p = DistributionTable([0, 1], [0.5, 0.5])
    q = DistributionTable([0], [1.0])
    assert tv_distance(p, p) == 0
    assert tv_distance(p, q) == 0.5
    assert tv_distance(q, DistributionTable([5], [1.0])) == 1.0
    assert tv_distance_exact(binomial_sum_distribution(2), exact_sum_distribution([1, -1])) == 0


tables = st.lists(st.tuples(st.integers(-4, 4), st.integers(1, 9)), min_size=1, max_size=6).map(
    lambda pairs: DistributionTable.from_counts([a for a, _ in pairs], [c for _, c in pairs])
    if len({a for a, _ in pairs}) == len(pairs) else DistributionTable([0], [1.0]))


@given(tables, tables, tables)
def test_tv_is_a_metric(p, q, r):
    assert tv_distance(p, q) == pytest.approx(tv_distance(q, p), abs=1e-15)
    assert tv_distance(p, p) == 0
    if tv_distance(p, q) == 0:
        assert np.array_equal(p.support[p.mass > 0], q.support[q.mass > 0])
    assert tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-12


def ref_cp(hits, n, level=0.99):
    """Exact binomial interval by bisection on the tail sums."""
    a = (1 - level) / 2

    def upper_tail(p):
        return sum(math.comb(n, j) * p ** j * (1 - p) ** (n - j) for j in range(hits, n + 1))

    def lower_tail(p):
        return sum(math.comb(n, j) * p ** j * (1 - p) ** (n - j) for j in range(0, hits + 1))

    def solve(fn, target, increasing):
        lo, hi = 0.0, 1.0
        for _ in range(80):
            mid = (lo + hi) / 2
            if (fn(mid) < target) == increasing:
                lo = mid
            else:
                hi = mid
        return (lo + hi) / 2

    lo = 0.0 if hits == 0 else solve(upper_tail, a, True)
    hi = 1.0 if hits == n else solve(lower_tail, a, False)
    return lo, hi


@pytest.mark.parametrize("hits,n", [(0, 10), (3, 10), (10, 10), (17, 60), (1, 200)])
def test_clopper_pearson_against_bisection(hits, n):
    lo, hi = clopper_pearson(hits, n)
    rlo, rhi = ref_cp(hits, n)
    assert lo == pytest.approx(rlo, abs=1e-9) and hi == pytest.approx(rhi, abs=1e-9)


def test_fourier_examples():
    for K in (0, 1, 5, 12):
        t = binomial_sum_distribution(K)
        assert fourier_coeff(t, 0) == 1
        for a in (0.03, 0.2, 0.37):
            assert fourier_coeff(t, a).real == pytest.approx(math.cos(2 * math.pi * a) ** K, abs=1e-12)
        assert fourier_coeff(t, 0.5).real == pytest.approx((-1) ** K, abs=1e-12)


@given(st.lists(st.integers(-20, 20), min_size=1, max_size=50), st.floats(-2, 2, allow_nan=False))
def test_fourier_character_sum_and_symmetries(samples, a):
    z = np.array(samples, float)
    direct = np.mean(np.exp(2j * np.pi * a * z))
    assert abs(fourier_coeff(z, a) - direct) < 1e-12
    assert abs(fourier_coeff(z, -a) - fourier_coeff(z, a).conjugate()) < 1e-12
    assert abs(fourier_coeff(z, a + 1) - fourier_coeff(z, a)) < 1e-9


@given(signed_vec, st.floats(-3, 3, allow_nan=False), st.integers(0, 2 ** 20))
def test_half_shift_per_sample(v, a, s):
    v = np.array(v, float)
    K = int(np.count_nonzero(v))
    x = bits_to_signs(np.random.default_rng(s).integers(0, 2, (30, len(v)))).astype(float)
    z = x @ v
    assert np.allclose(np.exp(2j * np.pi * (a + 0.5) * z), (-1) ** K * np.exp(2j * np.pi * a * z))
    red, factor = reduce_alpha(a, K)
    assert -0.25 <= red < 0.25
    assert abs(fourier_coeff(z, a) - factor * fourier_coeff(z, red)) < 1e-9


def test_fourier_to_tv_examples():
    assert fourier_to_tv_bound(0, 5) == 0
    assert fourier_to_tv_bound(0.1, 2) == pytest.approx(0.2)
    assert len(fourier_grid(3)) == 4


@pytest.mark.parametrize("gen", [kwise_bits(8, 2), eps_biased_bits(10, 0.3), combined_bits(6, 0.5, 2)],
                         ids=["kwise", "smallbias", "combined"])
def test_fourier_certificate_on_toys(gen, rng):
    out = gen.enumerate().astype(float)
    for _ in range(5):
        v = WeightVector.random_signed(gen.output_length, int(rng.integers(1, gen.output_length + 1)), rng)
        emp = DistributionTable.from_samples(out @ v.entries)
        cert = fourier_tv_certificate(emp, exact_sum_distribution(v))
        assert cert["holds"]


@pytest.mark.parametrize("gen", [kwise_bits(12, 3), kwise_bits(7, 2), kwise_bits(16, 5)],
                         ids=["k3", "k2", "k5"])
def test_linear_law_matches_enumeration(gen, rng):
    M, c = affine_structure(gen)
    out = gen.enumerate().astype(float)
    for _ in range(6):
        v = WeightVector.random_signed(gen.output_length, int(rng.integers(1, gen.output_length + 1)), rng)
        sup = np.nonzero(v.entries)[0]
        code = linear_sum_distribution(M[sup], c[sup], v.entries[sup])
        dual = linear_sum_distribution(M[sup], c[sup], v.entries[sup], enum_limit=0)
        want = brute_law(np.rint(out @ v.entries).astype(int))
        for law in (code, dual):
            if law is None:
                continue
            got = {int(s): m for s, m in zip(law.support, law.exact)}
            total = len(out)
            assert got == {k: Fraction(x, total) for k, x in want.items()}


def test_linear_law_dual_route_directly(rng):
    # a rank-deficient code: duplicated rows force the dual enumeration
    M = rng.integers(0, 2, (16, 3)).astype(np.uint8)
    c = rng.integers(0, 2, 16).astype(np.uint8)
    s = rng.choice([-1, 1], 16)
    a = linear_sum_distribution(M, c, s, enum_limit=24)
    b = linear_sum_distribution(M, c, s, enum_limit=13)
    seeds = all_seeds(3)
    y = (seeds.astype(int) @ M.T.astype(int) + c) % 2
    want = brute_law(((1 - 2 * y) * s).sum(axis=1))
    for law in (a, b):
        assert {int(k): m for k, m in zip(law.support, law.exact)} == {k: Fraction(x, 8) for k, x in want.items()}


def test_powering_generator_is_not_affine():
    # output bits are bilinear in the two seed halves
    with pytest.raises(ConfigurationError):
        affine_structure(eps_biased_bits(9, 0.1))


def test_affine_structure_rejects_nonlinear():
    from derandprg.core import TableGenerator
    g = TableGenerator(np.array([[1, 1], [1, -1], [-1, 1], [1, 1]], np.int8))
    with pytest.raises(ConfigurationError):
        affine_structure(g)


def test_tail_probability_edges(rng):
    g = eps_biased_bits(12, 0.05)
    w = WeightVector.random_unit(12, rng)
    assert tail_probability(g, w, 0, 500, 1).estimate == 1.0
    assert tail_probability(g, w, w.l1 + 0.01, 500, 1).estimate == 0.0


def test_tail_probability_exhaustive_is_exact(rng):
    g = kwise_bits(10, 3)
    w = WeightVector.random_unit(10, rng)
    est = tail_probability(g, w, 0.9, None, 0, exhaustive=True)
    out = g.enumerate().astype(float) @ w.entries
    assert est.estimate == np.mean(np.abs(out) >= 0.9)
    assert est.ci_low == est.ci_high == est.estimate


def test_empirical_table_equals_exact_on_uniform_toy():
    g = kwise_bits(5, 5)
    v = WeightVector([1, -1, 1, 0, 1])
    emp = empirical_sum_table(g, v, None, 0, exhaustive=True)
    assert tv_distance_exact(emp, exact_sum_distribution(v)) == 0


def direct_hv(v, h, m):
    return sum(sum(v[i] ** 2 for i in range(len(v)) if h[i] == j) ** 2 for j in range(m))


def test_hv_examples(rng):
    v = rng.standard_normal(16)
    assert hv_statistic(v, np.arange(16), 16) == pytest.approx(np.sum(v ** 4))
    assert hv_statistic(v, np.zeros(16, int), 1) == pytest.approx(np.sum(v ** 2) ** 2)
    u = np.ones(16) / 4
    assert hv_statistic(u, np.arange(16) % 4, 4) == pytest.approx(1 / 4)


@given(st.integers(1, 30), st.integers(1, 8), st.integers(0, 2 ** 20))
def test_hv_matches_bucket_sums(n, m, s):
    rng = np.random.default_rng(s)
    v, h = rng.standard_normal(n), rng.integers(0, m, n)
    assert hv_statistic(v, h, m) == pytest.approx(direct_hv(v, h, m), rel=1e-12)


def test_hv_probe_exhaustive_equals_average(rng):
    fam = KwiseFamily(8, 4, 2)
    v = rng.standard_normal(8)
    chk = moment_probe("hv", {"v": v, "family": fam}, [2, 4], None, 0)
    hs = fam.evaluate_batch(all_seeds(fam.seed_length))
    for p in (2, 4):
        assert chk.moments[p] == pytest.approx(np.mean([direct_hv(v, h, 4) ** p for h in hs]), rel=1e-12)
    assert chk.exhaustive


def test_hv_moment_monotone_under_scaling(rng):
    fam = SmallBiasFamily(16, 4, 0.05)
    v = rng.standard_normal(16)
    last = 0.0
    for scale in (0.5, 1.0, 2.0):
        m = moment_probe("hv", {"v": scale * v, "family": fam}, [2], 200, 3).moments[2]
        assert m > last
        last = m


def test_l2_probe_exhaustive_is_exact(rng):
    v = rng.standard_normal(10)
    h = rng.integers(0, 3, 10)
    chk = moment_probe("l2", {"v": v, "h": h, "m": 3}, [2], None, 0)
    assert chk.moments[2] == pytest.approx(np.sum(v * v), rel=1e-12)


def test_q2_probe_with_fixed_h_is_direct(rng):
    v = rng.standard_normal(8)
    h = rng.integers(0, 2, 8)
    chk = moment_probe("q2", {"v": v, "h": h, "m": 2, "alpha": 0.1}, [2], None, 0)
    xs = bits_to_signs(all_seeds(8)).astype(float)
    S = np.stack([(xs * v)[:, h == j].sum(axis=1) for j in range(2)], axis=1)
    q2 = 0.01 * ((S ** 2).sum(axis=1) - np.sum(v * v))
    assert chk.moments[2] == pytest.approx(np.mean(q2 ** 2), rel=1e-10)


def test_moment_orders_checked():
    with pytest.raises(ConfigurationError):
        moment_probe("hv", {"v": [1.0], "family": KwiseFamily(1, 2, 1)}, [3], 10, 0)


def test_log_cos_series_known_terms():
    # log cos x = -x^2/2 - x^4/12 - x^6/45 - 17 x^8/2520 - 31 x^10/14175 - ...
    want = [Fraction(-1, 2), Fraction(-1, 12), Fraction(-1, 45), Fraction(-17, 2520), Fraction(-31, 14175)]
    assert [log_cos_rational(j) for j in range(1, 6)] == want


@pytest.mark.parametrize("u", [0.01, 0.05, 0.12])
def test_log_cos_coeffs_sum_to_log_cos(u):
    total = math.fsum(log_cos_coeff(j) * u ** (2 * j) for j in range(1, 60))
    assert total == pytest.approx(math.log(math.cos(2 * math.pi * u)), rel=1e-12)


def test_cosine_alpha_zero():
    approx, true, terms = cosine_product_approx(CosineApproxInstance([1.0, 2.0], 5.0, 0.0, 8))
    assert approx == 1 and true == 1
    assert terms["error"] == 0 and terms["bound"] == 0


def test_cosine_single_term():
    approx, true, terms = cosine_product_approx(CosineApproxInstance([1.0], 1.0, 1e-3, 8))
    assert abs(approx - math.cos(2 * math.pi * 1e-3)) <= 1e-12
    assert true == pytest.approx(terms["direct_true"], rel=1e-14)


def test_cosine_error_decays_with_p():
    inst = cosine_corpus(1, 5)[0]
    errs = []
    for p in (4, 8, 12):
        _, _, terms = cosine_product_approx(CosineApproxInstance(inst.S, inst.T, inst.alpha, p))
        errs.append(terms["error"])
    # the error falls to the rounding floor once the tail is negligible
    assert errs[0] >= errs[1] - 1e-30 and errs[1] >= errs[2] - 1e-30
    K, _ = fit_cosine_constant([inst], 8)
    _, _, terms = cosine_product_approx(CosineApproxInstance(inst.S, inst.T, inst.alpha, 8))
    assert terms["error"] <= K ** 8 * terms["bound"] * (1 + 1e-12)


def test_cosine_corpus_respects_smallness():
    for inst in cosine_corpus(50, 2):
        assert np.all(np.abs(inst.alpha * inst.S) < 0.1)
        assert abs(inst.quad) < 0.01 and inst.quart < 0.01
