import numpy as np
import pytest
from hypothesis import given, strategies as st

from derandprg.core import (ConstantGenerator, Seed, SignVector, TableGenerator, all_seeds, bias_wrap,
                            bits_to_signs, signs_to_bits, symmetrize, xor_combine)
from derandprg.errors import ConfigurationError
from derandprg.hashing import eps_biased_bits


def toy(r, n, seed):
    rng = np.random.default_rng(seed)
    return TableGenerator(rng.choice(np.array([-1, 1], np.int8), size=(1 << r, n)), label=f"toy{seed}")


def test_bit_zero_is_plus_one():
    assert bits_to_signs([0, 1]).tolist() == [1, -1]
    assert signs_to_bits([1, -1]).tolist() == [0, 1]


def test_signs_reject_zero():
    with pytest.raises(ConfigurationError):
        signs_to_bits([1, 0, -1])


@given(st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=70))
def test_signvector_roundtrip(signs):
    v = SignVector.from_signs(signs)
    assert v.signs().tolist() == signs
    assert len(v.packed) == (len(signs) + 7) // 8
    assert SignVector(v.packed, v.n) == v
    assert hash(SignVector.from_signs(signs)) == hash(v)


@given(st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=40), st.data())
def test_signvector_product_is_pointwise(a, data):
    b = data.draw(st.lists(st.sampled_from([-1, 1]), min_size=len(a), max_size=len(a)))
    got = (SignVector.from_signs(a) * SignVector.from_signs(b)).signs()
    assert got.tolist() == [x * y for x, y in zip(a, b)]
    assert (-SignVector.from_signs(a)).signs().tolist() == [-x for x in a]


def test_signvector_padding_checked():
    with pytest.raises(ConfigurationError):
        SignVector(np.array([0xFF], np.uint8), 3)


@given(st.integers(1, 80), st.data())
def test_seed_int_and_hex_roundtrip(r, data):
    value = data.draw(st.integers(0, (1 << r) - 1))
    s = Seed.from_int(value, r)
    assert s.to_int() == value
    assert Seed.from_hex(s.to_hex(), r) == s
    assert s.bits[0] == value & 1


def test_seed_too_long_rejected():
    with pytest.raises(ConfigurationError):
        Seed.from_int(8, 3)


def test_xor_combine_examples():
    g1 = ConstantGenerator([1, 1, 1])
    g2 = ConstantGenerator([-1, 1, -1])
    assert xor_combine(g1, g2).expand([]).signs().tolist() == [-1, 1, -1]


def test_xor_combine_with_itself_is_all_plus():
    g = toy(3, 5, 0)
    c = xor_combine(g, g)
    seeds = all_seeds(3)
    out = c.expand_batch(np.hstack([seeds, seeds]))
    assert np.all(out == 1)


def test_xor_combine_commutes_on_swapped_halves():
    g1, g2 = toy(2, 6, 1), toy(3, 6, 2)
    a = xor_combine(g1, g2).enumerate()
    s = all_seeds(5)
    b = xor_combine(g2, g1).expand_batch(np.hstack([s[:, 2:], s[:, :2]]))
    assert np.array_equal(a, b)


def test_xor_combine_associative():
    g1, g2, g3 = toy(2, 4, 3), toy(1, 4, 4), toy(2, 4, 5)
    left = xor_combine(xor_combine(g1, g2), g3).enumerate()
    right = xor_combine(g1, xor_combine(g2, g3)).enumerate()
    assert np.array_equal(left, right)


def test_dimension_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        xor_combine(toy(1, 3, 0), toy(1, 4, 0))


def test_symmetrize_sign_bit():
    g = toy(2, 5, 7)
    s = symmetrize(g)
    for seed in all_seeds(2):
        v = g.expand(seed).signs()
        assert s.expand(np.append(seed, 0)).signs().tolist() == v.tolist()
        assert s.expand(np.append(seed, 1)).signs().tolist() == (-v).tolist()


def test_symmetrized_law_is_negation_symmetric():
    out = symmetrize(toy(3, 4, 9)).enumerate()
    rows = sorted(map(tuple, out.tolist()))
    assert rows == sorted(map(tuple, (-out).tolist()))


def test_bias_wrap_of_constant_plus_is_the_biased_string():
    n, eps = 6, 0.25
    wrapped = bias_wrap(ConstantGenerator(np.ones(n, np.int8)), eps)
    ref = eps_biased_bits(n, eps)
    assert np.array_equal(wrapped.enumerate(), ref.enumerate())


def test_purity_and_descriptor_stable(rng):
    g = eps_biased_bits(20, 0.01)
    seeds = (rng.random((8, g.seed_length)) < 0.5).astype(np.uint8)
    assert np.array_equal(g.expand_batch(seeds), g.expand_batch(seeds))
    assert g.descriptor_hash() == eps_biased_bits(20, 0.01).descriptor_hash()


def test_wrong_seed_length_rejected():
    with pytest.raises(ConfigurationError):
        toy(3, 2, 0).expand([0, 1])


def test_table_generator_needs_power_of_two_rows():
    with pytest.raises(ConfigurationError):
        TableGenerator(np.ones((3, 2), np.int8))
