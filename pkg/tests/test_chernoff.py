import dataclasses
import itertools
import math

import numpy as np
import pytest

from derandprg.chernoff import (BucketedGenerator, ChernoffConfig, FinalGenerator, InnerGenerator,
                                RecursiveGenerator, chernoff_params, one_step, project, schedule_seed_length,
                                seed_length_constant, stage_sizes)
from derandprg.core import all_seeds, bits_to_signs, random_seeds
from derandprg.errors import CapacityError, ConfigurationError
from derandprg.hashing import SmallBiasFamily


def params_with_sizes(sizes, bias=2.0 ** -10, **cfg):
    p = chernoff_params(sizes[0], 2.0 ** -10, ChernoffConfig(**cfg))
    return dataclasses.replace(p, stage_sizes=tuple(sizes), stage_bias=bias)


def test_one_step_examples():
    assert one_step([0, 1], [1, -1], [-1, 1]).tolist() == [-1, -1]
    assert one_step([2, 2, 2], [1, 1, 1], [1, 1, -1]).tolist() == [-1, -1, -1]
    x = np.array([1, -1, -1, 1])
    assert one_step([0, 1, 0, 1], x, [1, 1]).tolist() == x.tolist()


def test_one_step_coordinate_formula(rng):
    h = rng.integers(0, 5, size=(7, 30))
    x = rng.choice(np.array([-1, 1], np.int8), size=(7, 30))
    z = rng.choice(np.array([-1, 1], np.int8), size=(7, 5))
    out = one_step(h, x, z)
    for b in range(7):
        for i in range(30):
            assert out[b, i] == z[b, h[b, i]] * x[b, i]


def test_one_step_rejects_bad_hash():
    with pytest.raises(ConfigurationError):
        one_step([0, 3], [1, 1], [1, 1])


def test_zero_stages_returns_seed_string(rng):
    g = RecursiveGenerator(chernoff_params(64, 2.0 ** -10))
    assert g.k == 0 and g.seed_length == 64
    seeds = random_seeds(64, 5, rng)
    assert np.array_equal(g.expand_batch(seeds), bits_to_signs(seeds))


def test_one_stage_unrolls_to_one_step(rng):
    g = RecursiveGenerator(params_with_sizes((256, 16)))
    seeds = random_seeds(g.seed_length, 10, rng)
    hs, xs, z = g.split(seeds)
    h = g.hashes[0].evaluate_batch(hs[0])
    x = bits_to_signs(g.strings[0].evaluate_batch(xs[0]))
    assert np.array_equal(g.expand_batch(seeds), one_step(h, x, bits_to_signs(z)))


@pytest.mark.parametrize("sizes", [(16, 8, 4), (256, 16, 4), (64, 32, 16, 8, 2), (128, 8)])
def test_fused_equals_fold(sizes, rng):
    g = RecursiveGenerator(params_with_sizes(sizes))
    seeds = random_seeds(g.seed_length, 100, rng)
    assert np.array_equal(g.expand_batch(seeds), g.fold_batch(seeds))


def test_fused_equals_fold_at_desk_scale(rng):
    g = RecursiveGenerator(chernoff_params(4096, 2.0 ** -10))
    seeds = random_seeds(g.seed_length, 8, rng)
    assert np.array_equal(g.expand_batch(seeds), g.fold_batch(seeds))


def test_inner_matches_combinator_reference(rng):
    p = chernoff_params(1024, 2.0 ** -10)
    g = InnerGenerator(p)
    seeds = random_seeds(g.seed_length, 20, rng)
    assert np.array_equal(g.expand_batch(seeds), g.reference.expand_batch(seeds))


def test_inner_toy_is_symmetric_and_biased():
    p = chernoff_params(4, 0.25, ChernoffConfig(bias_floor=0.25, base_min=4))
    g = InnerGenerator(p)
    assert g.seed_length <= 16
    out = g.enumerate()
    assert sorted(map(tuple, out.tolist())) == sorted(map(tuple, (-out).tolist()))
    for r in range(1, 5):
        for S in itertools.combinations(range(4), r):
            assert abs(np.prod(out[:, S], axis=1).mean()) <= p.eps_inner


def test_bucketed_single_bucket_is_inner(rng):
    p = chernoff_params(256, 2.0 ** -10)
    inner = InnerGenerator(p)
    g = BucketedGenerator(p, inner, SmallBiasFamily(256, 1, 0.5), m=1)
    seeds = random_seeds(g.seed_length, 5, rng)
    assert np.array_equal(g.expand_batch(seeds), inner.expand_batch(seeds[:, g.rh:]))


def test_bucketed_coordinate_formula_and_locality(rng):
    p = chernoff_params(256, 2.0 ** -10)
    g = BucketedGenerator(p, m=8, hash_family=SmallBiasFamily(256, 8, 0.01))
    seeds = random_seeds(g.seed_length, 4, rng)
    out = g.expand_batch(seeds)
    h = g.buckets(seeds)
    D = g.inner.seed_length
    for b in range(4):
        zs = g.inner.expand_batch(seeds[b, g.rh:].reshape(8, D))
        assert np.array_equal(out[b], zs[h[b], np.arange(256)])
        j = int(h[b, 0])
        pert = seeds[b].copy()
        pert[g.rh + j * D:g.rh + (j + 1) * D] ^= 1
        changed = np.nonzero(g.expand_batch(pert[None])[0] != out[b])[0]
        assert set(changed.tolist()) <= set(np.nonzero(h[b] == j)[0].tolist())
        assert len(changed) > 0


def test_final_equals_bucketed_on_block_seeds(rng):
    g = FinalGenerator(chernoff_params(1024, 2.0 ** -10))
    seeds = random_seeds(g.seed_length, 3, rng)
    blocks = g.bucket_seeds(seeds).reshape(3, -1)
    bseeds = np.hstack([seeds[:, :g.rh], blocks])
    assert np.array_equal(g.expand_batch(seeds), g.bucketed.expand_batch(bseeds))
    assert np.array_equal(g.expand_batch(seeds), g.expand_batch(seeds))


@pytest.mark.parametrize("n,delta", [(1024, 2.0 ** -10), (4096, 2.0 ** -10), (256, 2.0 ** -6)])
def test_schedule_seed_length_matches_instance(n, delta):
    p = chernoff_params(n, delta)
    assert schedule_seed_length(p) == FinalGenerator(p).seed_length


def test_seed_length_constant_at_large_n():
    # the bucket hash here needs a field wider than 63 bits, so only the schedule is evaluated
    n = 1 << 16
    p = chernoff_params(n, 1 / n)
    with pytest.raises(CapacityError):
        FinalGenerator(p)
    r = schedule_seed_length(p)
    x = math.log2(n * n)
    assert seed_length_constant(n, 1 / n, r) == pytest.approx(r / (x * math.log2(x) ** 3))
    assert 0 < seed_length_constant(n, 1 / n, r) < 10


def test_project_examples(rng):
    w = rng.standard_normal(10)
    x = rng.choice([-1.0, 1.0], 10)
    ident = project(w, np.arange(10), x, 10)
    assert np.allclose(ident, w * x)
    assert np.linalg.norm(ident) == pytest.approx(np.linalg.norm(w))
    assert project(w, np.zeros(10, int), x, 1)[0] == pytest.approx(w @ x)


def test_project_preserves_l2_on_average(rng):
    w = rng.standard_normal(10)
    h = rng.integers(0, 3, 10)
    xs = bits_to_signs(all_seeds(10)).astype(float)
    mean = np.mean([np.sum(project(w, h, x, 3) ** 2) for x in xs])
    assert mean == pytest.approx(np.sum(w * w), rel=1e-12)


def test_stage_sizes_shrink_to_base():
    assert stage_sizes(4096, 64) == (4096, 64)
    assert stage_sizes(1 << 16, 32) == (65536, 256, 32)


def test_params_record_and_capacity():
    p = chernoff_params(4096, 2.0 ** -10)
    d = p.to_dict()
    assert d["stage_sizes"][0] == 4096 and d["m_buckets"] <= p.config.max_buckets
    assert p.stage_bias >= p.config.bias_floor
    with pytest.raises(CapacityError):
        chernoff_params(1 << 20, 2.0 ** -40)
    with pytest.raises(ConfigurationError):
        chernoff_params(16, 0.7)
