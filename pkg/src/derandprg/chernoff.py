"""Generators with Chernoff-type tails.

The stack, from the inside out:

* ``one_step``: hash coordinates into buckets and flip each bucket by a
  sign, on top of a small-bias string.
* ``RecursiveGenerator``: the one-step map iterated over stage sizes
  n_0 = n > n_1 > ... > n_k, with n_k uniform seed bits at the bottom.
  Coordinate i is z_{i_k} * prod_l x^l_{i_{l-1}}, where i_0 = i and
  i_l = h^l(i_{l-1}).
* ``InnerGenerator``: the recursive generator xored with a small-bias
  string and then randomly negated.
* ``BucketedGenerator``: coordinates hashed into m buckets, bucket j
  taking its values from an independent inner seed.
* ``FinalGenerator``: the bucketed generator with its m inner seeds drawn
  from the recursive branching-program generator.

Every stage hash and string is a small-bias family from ``hashing`` and
the fused evaluation kernel below is cross-checked against the plain
compositions in the tests.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from . import gf2
from .core import Generator, Symmetrized, bias_wrap, bits_to_signs
from .errors import CapacityError, ConfigurationError
from .hashing import SmallBiasFamily, eps_biased_bits, next_pow2, smallbias_field_bits
from .inw import INWGenerator, _get_field, pack_words, state_bits_for_halfspace, unpack_words


@dataclass(frozen=True)
class ChernoffConfig:
    """Constants of the construction; logarithms are base 2.

    ``bias_floor`` is a lower limit on the stage bias and on the bias of
    the wrapping string. ``max_buckets`` caps the bucket count of the
    bucketed generator. Both are needed to run at desk scale and are
    reported by the parameter record.
    """

    C1: float = 2.0
    C2: float = 2.0
    C8: float = 1.0
    D1: float = 1.0
    D2: float = 1.0
    D5: float = 1.0
    D6: float = 1.0
    D7: float = 1.0
    base_min: int = 64
    bias_floor: float = 2.0 ** -10
    max_buckets: int = 32

    def to_dict(self):
        return asdict(self)


def _lg(x):
    return math.log2(x)


def _loglog(x):
    return math.log2(max(2.0, math.log2(x)))


@dataclass
class ChernoffParams:
    n: int
    delta: float
    gamma: float
    m_buckets: int
    m_buckets_theory: float
    cap_applied: bool
    d_bound: float
    stage_sizes: tuple
    base_size: int
    stage_bias: float
    stage_bias_theory: float
    eps_inner: float
    eps_inner_theory: float
    config: ChernoffConfig

    @property
    def stages(self):
        return len(self.stage_sizes) - 1

    @property
    def bucket_condition_met(self):
        return self.m_buckets >= 10 * self.d_bound ** 2 * math.ceil(_lg(1 / self.gamma))

    def to_dict(self):
        d = asdict(self)
        d["stage_sizes"] = list(self.stage_sizes)
        d["bucket_condition_met"] = self.bucket_condition_met
        return d


def stage_sizes(n, base_size):
    """n_l = n^(2^-l) rounded up to a power of two, never below base_size."""
    sizes = [n]
    l = 1
    while sizes[-1] > base_size:
        nxt = max(next_pow2(math.ceil(n ** (2.0 ** -l) - 1e-9)), base_size)
        if nxt >= sizes[-1]:
            nxt = base_size
        sizes.append(nxt)
        l += 1
    return tuple(sizes)


def chernoff_params(n, delta, config=None, gamma=None):
    """Parameter schedule for target error ``delta``.

    With ``gamma`` given the record describes the moderate-tail generator
    at failure budget gamma; otherwise gamma follows from delta.
    """
    cfg = config or ChernoffConfig()
    if n < 2:
        raise ConfigurationError("n must be at least 2")
    if not 0 < delta < 0.5:
        raise ConfigurationError("delta must lie in (0, 1/2)")
    ll = _loglog(n)
    if gamma is None:
        gamma = delta ** 2 / (cfg.D5 * _lg(n / delta)) ** (cfg.D6 * ll)
    if not 0 < gamma < 1:
        raise ConfigurationError("gamma must lie in (0, 1)")
    if gamma < 2.0 ** -63:
        raise CapacityError(f"gamma {gamma:.3g} below 2^-63")
    d_bound = (cfg.C1 * _lg(n / gamma)) ** (cfg.C2 * math.ceil(math.log2(math.log2(n))))
    m_formula = (cfg.D1 * _lg(n / gamma)) ** (cfg.D2 * ll)
    m_theory = max(m_formula, 10 * d_bound ** 2 * math.ceil(_lg(1 / gamma)) + 1)
    m = next_pow2(min(m_theory, 2.0 ** 62))
    cap = m > cfg.max_buckets
    m = min(m, cfg.max_buckets)
    base = max(cfg.base_min, next_pow2(math.ceil(_lg(n / delta))))
    sizes = stage_sizes(n, base)
    bias_theory = (gamma / (cfg.C8 * n)) ** 2
    log_eps = cfg.D7 * _loglog(n / delta) ** 3 * _lg(n / delta)
    eps_theory = 2.0 ** -log_eps
    return ChernoffParams(n, delta, gamma, int(m), m_theory, cap, d_bound, sizes, base,
                          max(bias_theory, cfg.bias_floor), bias_theory,
                          max(eps_theory, cfg.bias_floor), eps_theory, cfg)


# ------------------------------------------------------------ plain operations

def one_step(h, x, z):
    """Coordinate i of the output is z[h[i]] * x[i]."""
    h = np.asarray(h, dtype=np.int64)
    x = np.asarray(x)
    z = np.asarray(z)
    if h.shape[-1] != x.shape[-1]:
        raise ConfigurationError("hash and string lengths differ")
    if h.size and (h.min() < 0 or h.max() >= z.shape[-1]):
        raise ConfigurationError("hash value outside the sign vector")
    if h.ndim == 1:
        return (z[..., h] * x).astype(np.int8)
    return (np.take_along_axis(z, h, axis=-1) * x).astype(np.int8)


def project(w, h, x, m=None):
    """Bucket sums of w * x: entry j is the sum over h(i) = j of w_i x_i."""
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.int64)
    if not len(w) == len(h) == len(x):
        raise ConfigurationError("dimensions differ")
    return np.bincount(h, weights=w * np.asarray(x, dtype=np.float64), minlength=m or 0)


# ------------------------------------------------------------ fused kernel

@njit(cache=True, inline="always")
def _power(a, p, la, s, T, lo, hi, red, scratch):
    """a^p for stream s; T[s] = (f, order, shift, lo_off, hi_off, red_off, red_rows, poly, mu), la = log a."""
    if a == 0:
        return np.uint64(1) if p == 0 else np.uint64(0)
    f = T[s, 0]
    order = T[s, 1]
    # order is 2^f - 1, so reduce by folding
    e = la * p
    while e > order:
        e = (e & order) + (e >> f)
    if e == order:
        e = 0
    sh = T[s, 2]
    u = lo[T[s, 3] + (e & ((1 << sh) - 1))]
    v = hi[T[s, 4] + (e >> sh)]
    if gf2.HAVE_CLMUL:
        return gf2.mul_barrett(u, v, f, np.uint64(T[s, 7]), np.uint64(T[s, 8]))
    return gf2.mul_reduced_at(u, v, f, red, T[s, 5], T[s, 6], scratch)


@njit(cache=True)
def _prepare(rows, s_off, s_f, s_poly, s_L, s_tab, s_loff, log_pool, la, ya, yc):
    """Per row and stream: a, log a and the adjusted masks y_c (bit c reads a^(iL) & y_c)."""
    one = np.uint64(1)
    for r in range(rows.shape[0]):
        for s in range(s_off.shape[0]):
            f = s_f[s]
            a = _get_field(rows[r], s_off[s], f)
            y = _get_field(rows[r], s_off[s] + f, f)
            ya[r, s] = a
            la[r, s] = np.int64(log_pool[s_loff[s] + a]) if (s_tab[s] and a != 0) else 0
            ac = np.uint64(1)
            top = one << np.uint64(f)
            for c in range(s_L[s]):
                # bit k of y_c is parity((a^c * x^k) & y)
                w = ac
                v = np.uint64(0)
                for k in range(f):
                    if gf2.parity64(w & y):
                        v |= one << np.uint64(k)
                    w <<= one
                    if w & top:
                        w ^= s_poly[s]
                yc[r, s, c] = v
                ac = gf2.nb_mul(ac, a, s_poly[s], f)


@njit(cache=True)
def _row_order(rows_b, cnt, order):
    """Counting sort of one sample's coordinates by seed row, so each row's data stays hot."""
    lo = rows_b.min()
    span = rows_b.max() - lo + 1
    if span > cnt.shape[0] - 1:
        for i in range(order.shape[0]):
            order[i] = i
        return
    cnt[:span + 1] = 0
    for i in range(rows_b.shape[0]):
        cnt[rows_b[i] - lo + 1] += 1
    for j in range(span):
        cnt[j + 1] += cnt[j]
    for i in range(rows_b.shape[0]):
        j = rows_b[i] - lo
        order[cnt[j]] = i
        cnt[j] += 1


@njit(cache=True)
def _evaluate(rows, row_of, k, hash_s, x_s, eps_s, z_off, sign_off, T, L, lo, hi, red, la, ya, yc, out):
    """out[b, i] = sign of coordinate i, read from row row_of[b, i]."""
    scratch = np.zeros(16, np.uint64)
    n = out.shape[1]
    cnt = np.zeros(4 * n + 2, np.int64)
    order = np.empty(n, np.int64)
    for b in range(out.shape[0]):
        _row_order(row_of[b], cnt, order)
        for q in range(n):
            i = order[q]
            r = row_of[b, i]
            bit = np.uint64(0)
            idx = i
            for l in range(k):
                s = x_s[l]
                p = _power(ya[r, s], idx, la[r, s], s, T, lo, hi, red, scratch)
                bit ^= gf2.parity64(p & yc[r, s, 0])
                s = hash_s[l]
                Ls = L[s]
                p = _power(ya[r, s], idx * Ls, la[r, s], s, T, lo, hi, red, scratch)
                nxt = 0
                for c in range(Ls):
                    nxt |= np.int64(gf2.parity64(p & yc[r, s, c])) << c
                idx = nxt
            zp = z_off + idx
            bit ^= (rows[r, zp >> 6] >> np.uint64(zp & 63)) & np.uint64(1)
            if eps_s >= 0:
                p = _power(ya[r, eps_s], i, la[r, eps_s], eps_s, T, lo, hi, red, scratch)
                bit ^= gf2.parity64(p & yc[r, eps_s, 0])
            if sign_off >= 0:
                bit ^= (rows[r, sign_off >> 6] >> np.uint64(sign_off & 63)) & np.uint64(1)
            out[b, i] = 1 - 2 * np.int8(bit)


_POOLS = {}


def _table_pool(fields):
    """Pooled log tables and split power tables for the given field sizes, with offsets."""
    key = tuple(sorted(set(f for f in fields if f <= gf2.TABLE_BITS)))
    if key not in _POOLS:
        logs, los, his, reds, off = [], [], [], [], {}
        l = a = b = c = 0
        for f in key:
            _, lg = gf2.log_tables(f)
            lo, hi, red, sh = gf2.split_tables(f)
            off[f] = (l, a, b, c, len(red), sh)
            logs.append(lg)
            los.append(lo)
            his.append(hi)
            reds.append(red)
            l, a, b, c = l + len(lg), a + len(lo), b + len(hi), c + len(red)
        cat = (lambda xs, dt, shape: np.concatenate(xs) if xs else np.zeros(shape, dt))
        _POOLS[key] = (cat(logs, np.uint32, 1), cat(los, np.uint64, 1), cat(his, np.uint64, 1),
                       cat(reds, np.uint64, (1, 256)), off)
    return _POOLS[key]


class _Layout:
    """Stream table for the fused kernel: one small-bias family per stream."""

    def __init__(self, families, offsets):
        self.families = families
        fs = [fam.field_bits for fam in families]
        self.log, self.lo, self.hi, self.red, off = _table_pool(fs)
        self.off = np.array(offsets, np.int64)
        self.f = np.array(fs, np.int64)
        self.poly = np.array([fam.poly for fam in families], np.uint64)
        self.L = np.array([fam.plane_bits for fam in families], np.int64)
        self.tab = np.array([f <= gf2.TABLE_BITS for f in fs], np.bool_)
        self.loff = np.array([off[f][0] if f in off else 0 for f in fs], np.int64)
        self.fusable = all(f in off for f in fs)
        T = np.zeros((len(fs), 9), np.int64)
        for s, fam in enumerate(families):
            f = fam.field_bits
            if f in off:
                _, a, b, c, nr, sh = off[f]
                T[s] = (f, (1 << f) - 1, sh, a, b, c, nr, fam.poly, gf2.barrett_mu(f))
        self.T = T
        self.Lmax = int(self.L.max()) if len(fs) else 1

    def prepare(self, rows):
        R, S = len(rows), len(self.f)
        la = np.zeros((R, S), np.int64)
        ya = np.zeros((R, S), np.uint64)
        yc = np.zeros((R, S, self.Lmax), np.uint64)
        _prepare(rows, self.off, self.f, self.poly, self.L, self.tab, self.loff, self.log, la, ya, yc)
        return la, ya, yc


# ------------------------------------------------------------ generators

class RecursiveGenerator(Generator):
    """Moderate-tail generator over the stage sizes of ``params``.

    Seed: the stage hash seeds h^1..h^k, then the stage string seeds
    x^1..x^k, then n_k uniform bits z. h^l maps [n_{l-1}] to [n_l] and
    x^l has length n_{l-1}; both have bias ``params.stage_bias``.
    """

    def __init__(self, params):
        self.schedule = params
        sizes = params.stage_sizes
        self.k = len(sizes) - 1
        for s in sizes[1:]:
            if s & (s - 1):
                raise ConfigurationError("stage sizes must be powers of two")
        self.hashes = [SmallBiasFamily(sizes[l], sizes[l + 1], params.stage_bias) for l in range(self.k)]
        self.strings = [SmallBiasFamily(sizes[l], 2, params.stage_bias) for l in range(self.k)]
        offs, pos = [], 0
        for fam in self.hashes + self.strings:
            offs.append(pos)
            pos += fam.seed_length
        self.z_off = pos
        self.z_len = sizes[-1]
        self.seed_length = pos + self.z_len
        self.output_length = params.n
        self._streams = (self.hashes + self.strings, offs)
        self.label = f"recursive(n={params.n},stages={self.k})"

    def layout(self, extra=(), extra_offsets=()):
        fams, offs = self._streams
        return _Layout(fams + list(extra), list(offs) + list(extra_offsets))

    def split(self, seeds):
        """(hash seeds, string seeds, z) as lists of bit arrays."""
        fams, offs = self._streams
        parts = [seeds[:, o:o + f.seed_length] for f, o in zip(fams, offs)]
        return parts[:self.k], parts[self.k:], seeds[:, self.z_off:self.z_off + self.z_len]

    def _batch(self, seeds):
        return fused_batch(self, pack_words(seeds), np.arange(len(seeds))[:, None].repeat(self.output_length, 1))

    def fold_batch(self, seeds):
        """Reference evaluation: fold one_step from the bottom stage up."""
        hs, xs, z = self.split(np.asarray(seeds, dtype=np.uint8))
        cur = bits_to_signs(z)
        for l in range(self.k - 1, -1, -1):
            h = self.hashes[l].evaluate_batch(hs[l])
            x = bits_to_signs(self.strings[l].evaluate_batch(xs[l]))
            cur = one_step(h, x, cur)
        return cur

    def params(self):
        return {"stage_sizes": list(self.schedule.stage_sizes), "stage_bias": self.schedule.stage_bias,
                "families": [f.descriptor() for f in self.hashes + self.strings]}


def fused_batch(gen, rows, row_of, with_eps=None, sign_off=-1):
    """Evaluate a recursive generator (optionally wrapped) on packed seed rows."""
    extra, extra_off = [], []
    eps_s = -1
    if with_eps is not None:
        fam, off = with_eps
        extra, extra_off = [fam], [off]
        eps_s = 2 * gen.k
    lay = gen.layout(extra, extra_off)
    if not lay.fusable:
        return _composed_batch(gen, rows, row_of, with_eps, sign_off)
    la, ya, yc = lay.prepare(rows)
    out = np.empty(row_of.shape, np.int8)
    hash_s = np.arange(gen.k, dtype=np.int64)
    x_s = np.arange(gen.k, 2 * gen.k, dtype=np.int64)
    _evaluate(rows, row_of.astype(np.int64), gen.k, hash_s, x_s, eps_s, gen.z_off, sign_off, lay.T, lay.L,
              lay.lo, lay.hi, lay.red, la, ya, yc, out)
    return out


def _composed_batch(gen, rows, row_of, with_eps, sign_off):
    """Slow path for fields without tables: full evaluation per row, then gather."""
    total = max(gen.seed_length, sign_off + 1)
    if with_eps is not None:
        total = max(total, with_eps[1] + with_eps[0].seed_length)
    bits = unpack_words(rows, total)
    full = gen.fold_batch(bits[:, :gen.seed_length])
    if with_eps is not None:
        fam, off = with_eps
        full = full * bits_to_signs(fam.evaluate_batch(bits[:, off:off + fam.seed_length]))
    if sign_off >= 0:
        full = full * bits_to_signs(bits[:, sign_off])[:, None]
    return full[row_of, np.arange(row_of.shape[1])[None, :]].astype(np.int8)


class InnerGenerator(Generator):
    """Recursive generator xored with an eps-biased string, then negated on one extra bit.

    Seed: recursive seed, then the eps-biased seed, then the sign bit.
    ``reference`` is the same object assembled from the generic
    combinators.
    """

    def __init__(self, params):
        self.base = RecursiveGenerator(params)
        self.wrap = eps_biased_bits(params.n, params.eps_inner)
        self.eps_off = self.base.seed_length
        self.sign_off = self.eps_off + self.wrap.seed_length
        self.seed_length = self.sign_off + 1
        self.output_length = params.n
        self.reference = Symmetrized(bias_wrap(self.base, params.eps_inner))
        if self.reference.seed_length != self.seed_length:
            raise AssertionError("inner seed layout mismatch")
        self.label = f"inner({self.base.label},eps={params.eps_inner:.3g})"

    def fused(self, rows, row_of):
        return fused_batch(self.base, rows, row_of, (self.wrap.family, self.eps_off), self.sign_off)

    def _batch(self, seeds):
        return self.fused(pack_words(seeds), np.arange(len(seeds))[:, None].repeat(self.output_length, 1))

    def children(self):
        return [self.base, self.wrap]

    def params(self):
        return {"eps_inner": self.wrap.declared_bias}


class BucketedGenerator(Generator):
    """Coordinate i takes inner(z_{h(i)})_i; seed is the bucket hash seed then m inner seeds."""

    def __init__(self, params, inner=None, hash_family=None, m=None):
        self.m = m or params.m_buckets
        self.inner = inner or InnerGenerator(params)
        self.hash = hash_family or SmallBiasFamily(params.n, self.m, params.gamma)
        if self.hash.m != self.m or self.hash.n != self.inner.output_length:
            raise ConfigurationError("bucket hash does not match the inner generator")
        self.rh = self.hash.seed_length
        self.seed_length = self.rh + self.m * self.inner.seed_length
        self.output_length = self.inner.output_length
        self.label = f"bucketed(m={self.m},{self.inner.label})"

    def buckets(self, seeds):
        return self.hash.evaluate_batch(seeds[:, :self.rh])

    def _batch(self, seeds):
        h = self.buckets(seeds)
        B, D = len(seeds), self.inner.seed_length
        inner_seeds = seeds[:, self.rh:].reshape(B * self.m, D)
        row_of = np.arange(B)[:, None] * self.m + h
        if isinstance(self.inner, InnerGenerator):
            return self.inner.fused(pack_words(inner_seeds), row_of)
        full = self.inner.expand_batch(inner_seeds)
        return full[row_of, np.arange(self.output_length)[None, :]]

    def children(self):
        return [self.inner]

    def params(self):
        return {"m": self.m, "hash": self.hash.descriptor()}


class FinalGenerator(Generator):
    """Bucketed generator whose m inner seeds are the blocks of a branching-program generator.

    Seed: bucket hash seed, then the block generator seed. The block
    generator fools programs with 2^S states, S the state bits of the
    compiled weighted-sum program for dimension n, reading m blocks of
    inner-seed length, with error delta.
    """

    def __init__(self, params, inw_budget=None):
        self.chernoff = params
        self.bucketed = BucketedGenerator(params)
        self.inner = self.bucketed.inner
        self.hash = self.bucketed.hash
        self.m = self.bucketed.m
        self.S = state_bits_for_halfspace(params.n)
        self.inw = INWGenerator(self.S, self.inner.seed_length, self.m, params.delta, inw_budget)
        self.rh = self.hash.seed_length
        self.seed_length = self.rh + self.inw.seed_length
        self.output_length = params.n
        self.label = f"final(n={params.n},delta={params.delta:.3g})"

    def bucket_seeds(self, seeds):
        """(B, m, D) inner seeds produced by the block generator."""
        return self.inw.blocks_batch(seeds[:, self.rh:])

    def _batch(self, seeds):
        h = self.hash.evaluate_batch(seeds[:, :self.rh])
        B = len(seeds)
        rows = self.inw.block_words(seeds[:, self.rh:]).reshape(B * self.m, -1)
        row_of = np.arange(B)[:, None] * self.m + h
        return self.inner.fused(np.ascontiguousarray(rows), row_of)

    def children(self):
        return [self.inner, self.inw]

    def params(self):
        d = self.chernoff.to_dict()
        d["config"] = self.chernoff.config.to_dict()
        d["S"] = self.S
        return d

    def seed_length_constant(self):
        """c with seed_length = c * log2(n/delta) * (log2 log2(n/delta))^3."""
        return seed_length_constant(self.chernoff.n, self.chernoff.delta, self.seed_length)


def _smallbias_seed(n, m, delta):
    positions = n * (m.bit_length() - 1)
    return 2 * smallbias_field_bits(positions, delta) if positions else 0


def schedule_seed_length(params, inw_budget=None):
    """Seed length of the final generator computed from the schedule alone.

    Needs no field arithmetic, so it also covers schedules whose bucket
    hash needs a field wider than the kernels support.
    """
    sizes = params.stage_sizes
    rec = sizes[-1]
    for a, b in zip(sizes, sizes[1:]):
        rec += _smallbias_seed(a, b, params.stage_bias) + _smallbias_seed(a, 2, params.stage_bias)
    inner = rec + _smallbias_seed(params.n, 2, params.eps_inner) + 1
    inw = INWGenerator(state_bits_for_halfspace(params.n), inner, params.m_buckets, params.delta, inw_budget)
    return _smallbias_seed(params.n, params.m_buckets, params.gamma) + inw.seed_length


def seed_length_constant(n, delta, seed_length):
    """c with seed_length = c * log2(n/delta) * (log2 log2(n/delta))^3."""
    x = _lg(n / delta)
    return seed_length / (x * math.log2(x) ** 3)


def recursive_prg(params):
    return RecursiveGenerator(params)


def inner_prg(params):
    return InnerGenerator(params)


def bucketed_prg(params, inner=None):
    return BucketedGenerator(params, inner)


def final_prg(n, delta, config=None):
    return FinalGenerator(chernoff_params(n, delta, config))
