"""Small-bias strings and hash families h: [n] -> [m].

Seeds are split positionally. A small-bias family over N bit positions
uses a 2f-bit seed (a, y), both read little-endian, and bit p is the
GF(2) inner product of a^p with y. Its bias is at most (N-1)/2^f.
Bucket h(i) of a family with m = 2^L collects bits i*L .. i*L+L-1,
bit c of the bucket index coming from position i*L + c.
"""
import math

import numpy as np
from numba import njit

from . import gf2
from .core import Generator, bits_to_signs
from .errors import CapacityError, ConfigurationError


def _is_pow2(m):
    return m >= 1 and m & (m - 1) == 0


def next_pow2(x):
    return 1 << max(0, math.ceil(math.log2(x))) if x > 1 else 1


@njit(cache=True)
def _smallbias_buckets(a, y, poly, f, n, L, out):
    # bit c of bucket i is parity(a^(iL) & yc[c]) where yc[c] is y pulled
    # back through multiplication by a^c, so one multiply per index suffices
    nq = (f + 7) // 8
    tab = np.empty((nq, 256), np.uint64)
    yc = np.empty(L, np.uint64)
    for b in range(a.shape[0]):
        ac = np.uint64(1)
        for c in range(L):
            w = np.uint64(0)
            for k in range(f):
                if gf2.parity64(gf2.nb_mul(ac, np.uint64(1) << np.uint64(k), poly, f) & y[b]):
                    w |= np.uint64(1) << np.uint64(k)
            yc[c] = w
            ac = gf2.nb_mul(ac, a[b], poly, f)
        gf2.fill_mul_table(ac, poly, f, tab)
        p = np.uint64(1)
        for i in range(n):
            v = 0
            for c in range(L):
                v |= np.int64(gf2.parity64(p & yc[c])) << c
            out[b, i] = v
            p = gf2.mul_by_table(tab, p)


@njit(cache=True)
def _kwise_eval(coefs, poly, f, n, m, pow2, use_tab, exp, log, offset, mu, out):
    k = coefs.shape[1]
    order = (1 << f) - 1
    hw = gf2.HAVE_CLMUL and f <= 32
    for b in range(coefs.shape[0]):
        for i in range(n):
            x = np.uint64(i + offset)
            acc = np.uint64(0)
            for t in range(k - 1, -1, -1):
                if hw:
                    acc = gf2.mul_barrett(acc, x, f, poly, mu)
                elif use_tab:
                    if acc != 0 and x != 0:
                        acc = np.uint64(exp[(np.int64(log[acc]) + np.int64(log[x])) % order])
                    else:
                        acc = np.uint64(0)
                else:
                    acc = gf2.nb_mul(acc, x, poly, f)
                acc ^= coefs[b, t]
            if pow2:
                out[b, i] = np.int64(acc & np.uint64(m - 1))
            else:
                out[b, i] = np.int64((acc * np.uint64(m)) >> np.uint64(f))


def smallbias_field_bits(positions, delta):
    """Field size f with (positions - 1) / 2^f <= delta."""
    need = (positions - 1) / delta
    return max(1, math.ceil(math.log2(need))) if need > 1 else 1


class HashFamily:
    """Seed-indexed family of maps [n] -> [m].

    ``evaluate_batch`` maps a (B, seed_length) bit array to (B, n) bucket
    indices. ``declared_bias`` and ``declared_independence`` are what the
    construction guarantees for joint laws of h(i_1), ..., h(i_r).
    """

    n = 0
    m = 1
    seed_length = 0
    declared_bias = 0.0
    declared_independence = 0
    field_bits = 0

    def evaluate_batch(self, seeds):
        seeds = np.asarray(seeds, dtype=np.uint8)
        if seeds.ndim != 2 or seeds.shape[1] != self.seed_length:
            raise ConfigurationError(f"expected seeds of shape (B, {self.seed_length}), got {seeds.shape}")
        return self._batch(seeds)

    def evaluate_all(self, seed):
        return self.evaluate_batch(np.asarray(seed, dtype=np.uint8).reshape(1, -1))[0]

    def evaluate(self, seed, i):
        if not 0 <= i < self.n:
            raise ConfigurationError(f"index {i} outside [0, {self.n})")
        return int(self.evaluate_all(seed)[i])

    def _batch(self, seeds):
        raise NotImplementedError

    def descriptor(self):
        return {"type": type(self).__name__, "n": self.n, "m": self.m, "delta": self.declared_bias,
                "k": self.declared_independence, "field_bits": self.field_bits,
                "seed_length": self.seed_length}


class SmallBiasFamily(HashFamily):
    """delta-biased family for m a power of two, built from bit planes of one small-bias string."""

    def __init__(self, n, m, delta):
        if n < 1:
            raise ConfigurationError("n must be positive")
        if not _is_pow2(m):
            raise ConfigurationError(f"bucket count {m} must be a power of two")
        if not 0 < delta < 1:
            raise ConfigurationError("delta must lie in (0, 1)")
        self.n, self.m, self.target_bias = n, m, delta
        self.plane_bits = m.bit_length() - 1
        self.positions = n * self.plane_bits
        if self.positions == 0:
            self.field_bits = 0
            self.seed_length = 0
            self.declared_bias = 0.0
            return
        f = smallbias_field_bits(self.positions, delta)
        if f > gf2.MAX_FIELD_BITS:
            raise CapacityError(
                f"bias {delta:.3g} over {self.positions} positions needs a {f}-bit field (max {gf2.MAX_FIELD_BITS})")
        self.field_bits = f
        self.poly = gf2.field_poly(f)
        self.seed_length = 2 * f
        # any nonempty parity is a polynomial of degree < positions in a
        self.declared_bias = (self.positions - 1) / 2.0 ** f

    def split(self, seeds):
        f = self.field_bits
        return gf2.pack_uint(seeds, 0, f), gf2.pack_uint(seeds, f, f)

    def _batch(self, seeds):
        out = np.zeros((len(seeds), self.n), np.int64)
        if self.seed_length == 0:
            return out
        a, y = self.split(seeds)
        _smallbias_buckets(a, y, np.uint64(self.poly), self.field_bits, self.n, self.plane_bits, out)
        return out


class KwiseFamily(HashFamily):
    """Degree k-1 polynomial over GF(2^f) evaluated at the element i + offset.

    Coefficients c_0..c_{k-1} take f seed bits each. Power-of-two m keeps
    the low bits, which is exactly k-wise independent. Other m scale
    down as floor(p*m / 2^f); each value then has probability within
    2^-f of 1/m and ``declared_bias`` is set to m / 2^f.
    """

    def __init__(self, n, m, k, field_bits=None, offset=0):
        if n < 1 or m < 1 or k < 1:
            raise ConfigurationError("n, m and k must be positive")
        f = gf2.bits_for(max(n + offset, m))
        if field_bits is not None:
            if field_bits < f:
                raise ConfigurationError(f"a {field_bits}-bit field cannot hold {max(n + offset, m)} points")
            f = field_bits
        self.offset = offset
        if f > gf2.MAX_FIELD_BITS:
            raise CapacityError(f"domain {max(n, m)} needs more than {gf2.MAX_FIELD_BITS} bits")
        self.pow2 = _is_pow2(m)
        if not self.pow2 and f > 32:
            raise CapacityError("non power-of-two ranges are limited to 32-bit fields")
        self.n, self.m, self.k = n, m, k
        self.field_bits = f
        self.poly = gf2.field_poly(f)
        self.mu = gf2.barrett_mu(f) if f <= 32 else 0
        self.seed_length = k * f
        self.declared_independence = k
        self.declared_bias = 0.0 if self.pow2 else m / 2.0 ** f
        if f <= gf2.TABLE_BITS:
            self._exp, self._log = gf2.log_tables(f)
        else:
            self._exp = self._log = np.zeros(1, np.uint32)

    def coefficients(self, seeds):
        f = self.field_bits
        return np.stack([gf2.pack_uint(seeds, t * f, f) for t in range(self.k)], axis=-1)

    def _batch(self, seeds):
        out = np.empty((len(seeds), self.n), np.int64)
        _kwise_eval(self.coefficients(seeds), np.uint64(self.poly), self.field_bits, self.n, self.m,
                    self.pow2, self.field_bits <= gf2.TABLE_BITS, self._exp, self._log, self.offset,
                    np.uint64(self.mu), out)
        return out


class SumFamily(HashFamily):
    """Pointwise sum mod m of two families on a split seed (first's bits first)."""

    def __init__(self, first, second):
        if (first.n, first.m) != (second.n, second.m):
            raise ConfigurationError("families must share domain and range")
        self.first, self.second = first, second
        self.n, self.m = first.n, first.m
        self.seed_length = first.seed_length + second.seed_length
        self.declared_bias = first.declared_bias
        self.declared_independence = second.declared_independence
        self.field_bits = max(first.field_bits, second.field_bits)

    def _batch(self, seeds):
        r = self.first.seed_length
        return (self.first.evaluate_batch(seeds[:, :r]) + self.second.evaluate_batch(seeds[:, r:])) % self.m

    def descriptor(self):
        d = super().descriptor()
        d["parts"] = [self.first.descriptor(), self.second.descriptor()]
        return d


class SpreadingFamily(SmallBiasFamily):
    """Small-bias family sized to spread large index sets.

    Bucket count is c_spread * ceil(log2(1/eps))^5 rounded up to a power of
    two and the bias is eps^C_spread.
    """

    def __init__(self, n, eps, c_spread=1.0, C_spread=3.0, max_buckets=None):
        if not 0 < eps < 1:
            raise ConfigurationError("eps must lie in (0, 1)")
        self.eps = eps
        self.ell = max(1, math.ceil(math.log2(1 / eps)))
        self.m_requested = max(1, math.ceil(c_spread * self.ell ** 5))
        m = next_pow2(self.m_requested)
        self.capped = max_buckets is not None and m > max_buckets
        if self.capped:
            m = max_buckets
        self.c_spread, self.C_spread = c_spread, C_spread
        super().__init__(n, m, math.exp(-C_spread * math.log(1 / eps)))

    def descriptor(self):
        d = super().descriptor()
        d.update(eps=self.eps, ell=self.ell, m_requested=self.m_requested, capped=self.capped,
                 c_spread=self.c_spread, C_spread=self.C_spread)
        return d


class BitDistribution(Generator):
    """A family with m = 2 read in the sign alphabet."""

    def __init__(self, family, label=None):
        if family.m != 2:
            raise ConfigurationError("bit distributions need a family with two buckets")
        self.family = family
        self.seed_length = family.seed_length
        self.output_length = family.n
        self.declared_bias = family.declared_bias
        self.declared_independence = family.declared_independence
        self.label = label or type(family).__name__

    def _batch(self, seeds):
        return bits_to_signs(self.family.evaluate_batch(seeds))

    def params(self):
        return {"family": self.family.descriptor()}


def eps_biased_bits(n, eps):
    if not 0 < eps < 1:
        raise ConfigurationError("eps must lie in (0, 1)")
    return BitDistribution(SmallBiasFamily(n, 2, eps), label=f"smallbias(n={n},eps={eps:.3g})")


def kwise_family(n, m, k):
    return KwiseFamily(n, m, k)


def delta_biased_family(n, m, delta):
    return SmallBiasFamily(n, m, delta)


def combined_family(n, m, delta, k):
    return SumFamily(SmallBiasFamily(n, m, delta), KwiseFamily(n, m, k))


def kwise_bits(n, k):
    return BitDistribution(KwiseFamily(n, 2, k), label=f"kwise(n={n},k={k})")


def combined_bits(n, delta, k):
    return BitDistribution(combined_family(n, 2, delta, k), label=f"combined(n={n},delta={delta:.3g},k={k})")


def spreading_family(n, eps, c_spread=1.0, C_spread=3.0, max_buckets=None):
    return SpreadingFamily(n, eps, c_spread, C_spread, max_buckets)


def bucket_loads(h, index_set, m=None):
    h = np.asarray(h)
    idx = np.asarray(sorted(index_set), dtype=np.int64)
    return np.bincount(h[idx], minlength=m or 0)


def verify_spreading(h, index_set, ell):
    """True iff no bucket receives more than |I|/ell of the indices in I."""
    index_set = list(index_set)
    if not index_set:
        raise ConfigurationError("index set must be nonempty")
    loads = bucket_loads(h, index_set)
    return bool(loads.max() * ell <= len(index_set))
