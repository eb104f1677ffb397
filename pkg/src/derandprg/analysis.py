"""Exact laws of weighted sums, distances between them, and sampled estimators.

Everything Monte-Carlo takes an explicit ``rng_seed`` for the experiment
RNG, which is separate from generator seeds. Confidence intervals are
exact binomial (Clopper-Pearson) at 99% unless stated otherwise.
"""
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from numba import njit
from scipy import special, stats

from .core import all_seeds, random_seeds
from .errors import CapacityError, ConfigurationError

LEVEL = 0.99
SUPPORT_CAP = 1 << 22


# ------------------------------------------------------------ weight vectors

class WeightVector:
    """Real test vector with cached l0, l1, l2 and l4 norms."""

    def __init__(self, entries):
        self.entries = np.asarray(entries, dtype=np.float64).copy()
        self.entries.setflags(write=False)
        e = self.entries
        self.l0 = int(np.count_nonzero(e))
        self.l1 = float(np.abs(e).sum())
        self.l2 = float(np.sqrt((e * e).sum()))
        self.l4 = float(((e * e) ** 2).sum() ** 0.25)
        self.signed = bool(np.all(np.isin(e, (-1.0, 0.0, 1.0))))

    def __len__(self):
        return len(self.entries)

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def norms(self):
        return {"l0": self.l0, "l1": self.l1, "l2": self.l2, "l4": self.l4}

    @classmethod
    def random_unit(cls, n, rng):
        w = rng.standard_normal(n)
        return cls(w / np.linalg.norm(w))

    @classmethod
    def random_signed(cls, n, density, rng):
        """Random {0,+-1} vector with exactly ``density`` nonzero entries."""
        v = np.zeros(n)
        idx = rng.choice(n, size=density, replace=False)
        v[idx] = rng.choice((-1.0, 1.0), size=density)
        return cls(v)


def _entries(v):
    return v.entries if isinstance(v, WeightVector) else np.asarray(v, dtype=np.float64)


# ------------------------------------------------------------ distribution tables

class DistributionTable:
    """Probability mass on a finite sorted support.

    ``exact`` holds Fraction masses when the table came from an exact
    computation; ``samples`` is the sample count for empirical tables.
    """

    def __init__(self, support, mass, provenance="exact", samples=None, exact=None):
        support = np.asarray(support, dtype=np.float64)
        mass = np.asarray(mass, dtype=np.float64)
        if support.shape != mass.shape or support.ndim != 1:
            raise ConfigurationError("support and mass must be matching 1-d arrays")
        if len(support) > 1 and np.any(np.diff(support) <= 0):
            raise ConfigurationError("support must be strictly increasing")
        if np.any(mass < 0) or abs(mass.sum() - 1.0) > 1e-12:
            raise ConfigurationError("masses must be nonnegative and sum to 1")
        self.support, self.mass = support, mass
        self.provenance, self.samples = provenance, samples
        self.exact = exact

    @classmethod
    def from_counts(cls, values, counts, provenance="exact", samples=None):
        values = np.asarray(values, dtype=np.float64)
        counts = np.asarray(counts)
        keep = counts > 0
        values, counts = values[keep], counts[keep]
        order = np.argsort(values)
        values, counts = values[order], counts[order]
        total = int(counts.sum())
        exact = tuple(Fraction(int(c), total) for c in counts)
        return cls(values, counts / total, provenance, samples, exact)

    @classmethod
    def from_samples(cls, values):
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        u, c = np.unique(values, return_counts=True)
        return cls.from_counts(u, c, provenance="empirical", samples=len(values))

    def __len__(self):
        return len(self.support)

    def prob(self, predicate):
        return float(self.mass[predicate(self.support)].sum())

    def residue_mass(self, modulus, residue):
        s = np.rint(self.support).astype(np.int64)
        return float(self.mass[(s - residue) % modulus == 0].sum())

    def mean(self):
        return float((self.support * self.mass).sum())

    def to_dict(self):
        return {"support": self.support.tolist(), "mass": self.mass.tolist(),
                "provenance": self.provenance, "samples": self.samples}

    def __repr__(self):
        return f"DistributionTable({len(self)} points, {self.provenance})"


def binomial_sum_distribution(k):
    """Law of the sum of k independent uniform signs: 2*Bin(k,1/2) - k."""
    counts = [math.comb(k, j) for j in range(k + 1)]
    support = np.arange(-k, k + 1, 2, dtype=np.float64)
    exact = tuple(Fraction(c, 1 << k) for c in counts)
    return DistributionTable(support, np.array([float(x) for x in exact]), "exact", None, exact)


def exact_sum_distribution(v, cap=SUPPORT_CAP):
    """Exact law of <v, X> for uniform X.

    {0,+-1} vectors use the shifted binomial. Other vectors are convolved
    one coordinate at a time over exact binary fractions, which needs at
    most 40 nonzero entries.
    """
    e = _entries(v)
    nz = e[e != 0]
    if np.all(np.abs(nz) == 1):
        return binomial_sum_distribution(len(nz))
    if len(nz) > 40:
        raise CapacityError(f"{len(nz)} nonzero weights; exact convolution supports at most 40")
    law = {Fraction(0): 1}
    for w in nz:
        w = Fraction(float(w))
        nxt = {}
        for s, c in law.items():
            nxt[s + w] = nxt.get(s + w, 0) + c
            nxt[s - w] = nxt.get(s - w, 0) + c
        law = nxt
        if len(law) > cap:
            raise CapacityError(f"support exceeds {cap} points")
    total = 1 << len(nz)
    # distinct exact sums can round to the same float; merge them
    merged = {}
    for k, c in law.items():
        merged[float(k)] = merged.get(float(k), 0) + c
    keys = sorted(merged)
    exact = tuple(Fraction(merged[k], total) for k in keys)
    return DistributionTable(np.array(keys), np.array([float(x) for x in exact]), "exact", None, exact)


def _aligned(p, q):
    support = np.union1d(p.support, q.support)
    a = np.zeros(len(support))
    b = np.zeros(len(support))
    a[np.searchsorted(support, p.support)] = p.mass
    b[np.searchsorted(support, q.support)] = q.mass
    return support, a, b


def tv_distance(p, q):
    """Half the l1 distance between two tables."""
    _, a, b = _aligned(p, q)
    return 0.5 * math.fsum(np.abs(a - b))


def tv_distance_exact(p, q):
    if p.exact is None or q.exact is None:
        raise ConfigurationError("both tables must carry exact masses")
    law = {}
    for s, m in zip(p.support, p.exact):
        law[s] = law.get(s, 0) + m
    for s, m in zip(q.support, q.exact):
        law[s] = law.get(s, 0) - m
    return sum(abs(x) for x in law.values()) / 2


def tv_sampling_slack(support_size, samples, level=LEVEL):
    """Upper deviation of an empirical table's TV from its source law.

    The expected TV between an empirical law on N samples and its source
    is at most sqrt(B/N)/2 for B support points; the bounded-difference
    inequality adds sqrt(log(1/(1-level))/(2N)).
    """
    return 0.5 * math.sqrt(support_size / samples) + math.sqrt(math.log(1 / (1 - level)) / (2 * samples))


def dkw_slack(samples, level=LEVEL):
    """Two-sided DKW band for an empirical CDF."""
    return math.sqrt(math.log(2 / (1 - level)) / (2 * samples))


def clopper_pearson(hits, trials, level=LEVEL):
    a = 1 - level
    lo = 0.0 if hits == 0 else float(stats.beta.ppf(a / 2, hits, trials - hits + 1))
    hi = 1.0 if hits == trials else float(stats.beta.ppf(1 - a / 2, hits + 1, trials - hits))
    return lo, hi


# ------------------------------------------------------------ Fourier side

def fourier_coeff(obj, alpha):
    """E[exp(2 pi i alpha Z)] for a table or a sample array, summed with fsum."""
    if isinstance(obj, DistributionTable):
        support, mass = obj.support, obj.mass
    else:
        u, c = np.unique(np.asarray(obj, dtype=np.float64).reshape(-1), return_counts=True)
        support, mass = u, c / c.sum()
    if alpha == 0:
        return complex(1.0)
    ang = 2 * np.pi * alpha * support
    return complex(math.fsum(mass * np.cos(ang)), math.fsum(mass * np.sin(ang)))


def reduce_alpha(alpha, l0):
    """Map alpha into [-1/2, 1/2) using period 1, returning (alpha', factor).

    For {0,+-1} vectors E[phi(alpha+1/2)] = (-1)^{l0} E[phi(alpha)], so a
    further half shift is recorded in ``factor``.
    """
    a = alpha - math.floor(alpha + 0.5)
    factor = 1
    if a >= 0.25:
        a -= 0.5
        factor = -1 if l0 % 2 else 1
    elif a < -0.25:
        a += 0.5
        factor = -1 if l0 % 2 else 1
    return a, factor


def fourier_grid(B):
    """alpha = j/(2B+1), j = 0..B; conjugacy covers the negative half."""
    return np.arange(B + 1) / (2 * B + 1)


def fourier_to_tv_bound(max_fourier_gap, support_bound):
    if support_bound < 1 or max_fourier_gap < 0:
        raise ConfigurationError("need B >= 1 and a nonnegative gap")
    return math.sqrt(2 * support_bound) * max_fourier_gap


def fourier_tv_certificate(p, q, slack=1e-9):
    """Compare exact TV with sqrt(2B) times the max Fourier gap on a finite grid.

    For integer supports spanning fewer than N = 2B+1 consecutive
    integers the grid j/N sees the whole difference by the discrete
    Plancherel identity. A wider span widens the grid and is reported.
    """
    B = max(len(p), len(q))
    support = np.union1d(p.support, q.support)
    if not np.allclose(support, np.rint(support)):
        raise ConfigurationError("certificate needs integer supports")
    span = int(support[-1] - support[0]) if len(support) else 0
    N = max(2 * B + 1, span + 1)
    grid = np.arange(N // 2 + 1) / N
    gap = max(abs(fourier_coeff(p, a) - fourier_coeff(q, a)) for a in grid)
    tv = tv_distance(p, q)
    bound = fourier_to_tv_bound(gap, B)
    return {"tv": tv, "B": B, "grid_size": N, "grid_widened": N != 2 * B + 1, "max_gap": gap,
            "bound": bound, "holds": tv <= bound + slack}


# ------------------------------------------------------------ linear generators

@njit(cache=True, inline="always")
def _popcount(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return np.int64((x * np.uint64(0x0101010101010101)) >> np.uint64(56))


@njit(cache=True)
def _trailing_zeros(g):
    t = 0
    while (g >> t) & 1 == 0:
        t += 1
    return t


@njit(cache=True)
def _enum_code(basis, offset, pos, neg, K, counts):
    W = offset.shape[0]
    cur = offset.copy()
    npos = 0
    nneg = 0
    for w in range(W):
        npos += _popcount(pos[w])
        nneg += _popcount(neg[w])
    for g in range(1 << basis.shape[0]):
        if g > 0:
            t = _trailing_zeros(g)
            for w in range(W):
                cur[w] ^= basis[t, w]
        a = 0
        b = 0
        for w in range(W):
            a += _popcount(cur[w] & pos[w])
            b += _popcount(cur[w] & neg[w])
        s = npos - nneg - 2 * (a - b)
        counts[s + K] += 1


@njit(cache=True)
def _enum_dual(basis, offset, neg, hist):
    W = offset.shape[0]
    cur = np.zeros(W, np.uint64)
    for g in range(1 << basis.shape[0]):
        if g > 0:
            t = _trailing_zeros(g)
            for w in range(W):
                cur[w] ^= basis[t, w]
        wt = 0
        par = 0
        for w in range(W):
            wt += _popcount(cur[w])
            par += _popcount(cur[w] & neg[w]) + _popcount(cur[w] & offset[w])
        hist[wt, par & 1] += 1


def _to_words(ints, K):
    W = max(1, (K + 63) // 64)
    out = np.zeros((len(ints), W), np.uint64)
    for r, x in enumerate(ints):
        for w in range(W):
            out[r, w] = (x >> (64 * w)) & 0xFFFFFFFFFFFFFFFF
    return out


def _bits_to_int(bits):
    return int.from_bytes(np.packbits(np.asarray(bits, np.uint8), bitorder="little").tobytes(), "little")


def _rref(vectors):
    """Reduced echelon basis of the span of Python-int bit vectors: {pivot bit: row}."""
    rows = {}
    for v in vectors:
        for piv, r in rows.items():
            if v >> piv & 1:
                v ^= r
        if v:
            piv = v.bit_length() - 1
            for p2 in list(rows):
                if rows[p2] >> piv & 1:
                    rows[p2] ^= v
            rows[piv] = v
    return rows


def _sym_poly_coeffs(K, b):
    """Coefficients of (z + 1/z)^(K-b) (z - 1/z)^b, index e <-> exponent e - K."""
    a = np.array([math.comb(K - b, t) for t in range(K - b + 1)], dtype=object)
    c = np.array([(-1) ** t * math.comb(b, t) for t in range(b + 1)], dtype=object)
    prod = np.convolve(a, c)
    # exponent of term t in the product is K - 2t
    out = np.zeros(2 * K + 1, dtype=object)
    for t, x in enumerate(prod):
        out[2 * K - 2 * t] = x
    return out


def linear_sum_distribution(matrix, offset, signs, enum_limit=24):
    """Exact law of sum_i s_i (-1)^{y_i} where y = matrix @ seed + offset over GF(2).

    ``matrix`` is (K, r) with rows indexed by support coordinates. Either
    the code (dimension rho) or its dual (dimension K - rho) is enumerated,
    whichever is at most ``enum_limit``; otherwise returns None.
    """
    matrix = np.asarray(matrix, dtype=np.uint8) & 1
    K = matrix.shape[0]
    signs = np.asarray(signs)
    if K == 0:
        return DistributionTable([0.0], [1.0], "exact", None, (Fraction(1),))
    cols = [_bits_to_int(matrix[:, c]) for c in range(matrix.shape[1])]
    rows = _rref(cols)
    rho = len(rows)
    off = _bits_to_int(offset)
    neg = _bits_to_int(signs < 0)
    pos = _bits_to_int(signs > 0)
    if rho <= enum_limit:
        basis = _to_words(list(rows.values()), K)
        counts = np.zeros(2 * K + 1, np.int64)
        _enum_code(basis.reshape(rho, -1), _to_words([off], K)[0], _to_words([pos], K)[0],
                   _to_words([neg], K)[0], K, counts)
        idx = np.nonzero(counts)[0]
        total = 1 << rho
        exact = tuple(Fraction(int(counts[i]), total) for i in idx)
        return DistributionTable(idx - K, np.array([float(x) for x in exact]), "exact", None, exact)
    if K - rho <= enum_limit:
        pivots = set(rows)
        dual = []
        for fbit in range(K):
            if fbit in pivots:
                continue
            u = 1 << fbit
            for piv, r in rows.items():
                if r >> fbit & 1:
                    u |= 1 << piv
            dual.append(u)
        hist = np.zeros((K + 1, 2), np.int64)
        basis = _to_words(dual, K).reshape(len(dual), (K + 63) // 64)
        _enum_dual(basis, _to_words([off], K)[0], _to_words([neg], K)[0], hist)
        acc = np.zeros(2 * K + 1, dtype=object)
        for b in range(K + 1):
            net = int(hist[b, 0]) - int(hist[b, 1])
            if net:
                acc = acc + net * _sym_poly_coeffs(K, b)
        denom = 1 << K
        idx = [e for e in range(2 * K + 1) if acc[e] != 0]
        exact = tuple(Fraction(int(acc[e]), denom) for e in idx)
        if any(x < 0 for x in exact):
            raise AssertionError("negative mass from dual enumeration")
        return DistributionTable(np.array(idx) - K, np.array([float(x) for x in exact]), "exact", None, exact)
    return None


def affine_structure(gen, rng=None, checks=16):
    """(M, c) with bits(gen(s)) = M s + c over GF(2), verified on random seeds."""
    r = gen.seed_length
    probe = np.zeros((r + 1, r), np.uint8)
    probe[1:] = np.eye(r, dtype=np.uint8)
    out = (gen.expand_batch(probe) < 0).astype(np.uint8)
    c = out[0]
    M = (out[1:] ^ c).T
    rng = rng or np.random.default_rng(0)
    seeds = random_seeds(r, checks, rng)
    want = (gen.expand_batch(seeds) < 0).astype(np.uint8)
    got = ((seeds.astype(np.int64) @ M.T.astype(np.int64)) % 2).astype(np.uint8) ^ c
    if not np.array_equal(want, got):
        raise ConfigurationError(f"{gen.label} is not affine over GF(2)")
    return M, c


# ------------------------------------------------------------ sampling

def iter_batches(gen, samples, rng_seed, batch_size=4096, exhaustive=False):
    """Yield output batches for ``samples`` random seeds, or for every seed."""
    if exhaustive:
        seeds = all_seeds(gen.seed_length)
        for s in range(0, len(seeds), batch_size):
            yield gen.expand_batch(seeds[s:s + batch_size])
        return
    rng = np.random.default_rng(rng_seed)
    done = 0
    while done < samples:
        b = min(batch_size, samples - done)
        yield gen.expand_batch(random_seeds(gen.seed_length, b, rng))
        done += b


def sample_dots(gen, W, samples, rng_seed, batch_size=4096, exhaustive=False):
    """<w_k, G(y)> for every row w_k of W; returns (samples, k)."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    parts = [batch.astype(np.float64) @ W.T for batch in
             iter_batches(gen, samples, rng_seed, batch_size, exhaustive)]
    return np.concatenate(parts) if parts else np.zeros((0, len(W)))


@dataclass
class TailEstimate:
    t: float
    hits: int
    samples: int
    estimate: float
    ci_low: float
    ci_high: float
    level: float = LEVEL
    exhaustive: bool = False


def tail_from_dots(dots, t, exhaustive=False, level=LEVEL):
    dots = np.asarray(dots)
    hits = int(np.count_nonzero(np.abs(dots) >= t - 1e-9 * max(1.0, abs(t)))) if t > 0 else len(dots)
    n = len(dots)
    lo, hi = (hits / n, hits / n) if exhaustive else clopper_pearson(hits, n, level)
    return TailEstimate(float(t), hits, n, hits / n, lo, hi, level, exhaustive)


def tail_probability(gen, w, t, samples, rng_seed, exhaustive=False, batch_size=4096):
    """Estimate Pr[|<w, G(y)>| >= t] with an exact binomial interval.

    With ``exhaustive`` every seed is evaluated and the interval collapses
    to the exact probability.
    """
    dots = sample_dots(gen, _entries(w), samples, rng_seed, batch_size, exhaustive)[:, 0]
    return tail_from_dots(dots, t, exhaustive)


def empirical_sum_table(gen, v, samples, rng_seed, exhaustive=False, batch_size=4096):
    dots = sample_dots(gen, _entries(v), samples, rng_seed, batch_size, exhaustive)[:, 0]
    return DistributionTable.from_samples(np.rint(dots) if np.all(np.isin(_entries(v), (-1, 0, 1))) else dots)


# ------------------------------------------------------------ hashing statistics

def bucket_vector(v, h, m=None):
    """Per-bucket sums of v: the projection with all signs +1."""
    h = np.asarray(h, dtype=np.int64)
    return np.bincount(h, weights=_entries(v), minlength=m or (int(h.max()) + 1 if len(h) else 0))


def hv_statistic(v, h, m=None):
    """sum_j ||v restricted to h^{-1}(j)||_2^4."""
    e = _entries(v)
    h = np.asarray(h, dtype=np.int64)
    if len(h) != len(e):
        raise ConfigurationError("hash and vector lengths differ")
    sq = np.bincount(h, weights=e * e, minlength=m or 0)
    return math.fsum(sq * sq)


def heavy_light_split(w, m, gamma):
    """Split w at beta = 1/(m^2 sqrt(log(1/gamma))) into heavy and light parts."""
    e = _entries(w)
    beta = 1.0 / (m * m * math.sqrt(math.log(1 / gamma)))
    heavy = np.where(np.abs(e) >= beta, e, 0.0)
    return heavy, e - heavy, beta


def collision_excess(h, index_set):
    """|I| - |h(I)|: how many indices of I land on an already occupied bucket."""
    idx = np.asarray(sorted(index_set), dtype=np.int64)
    return len(idx) - len(np.unique(np.asarray(h)[idx]))


def hybrid_step_error(v, alpha, family, signs, trials, rng_seed):
    """|E[phi(X A(h) D(Z))] - E[phi(X')]| for uniform X on the buckets and uniform X'.

    Averaging over X exactly leaves prod_j cos(2 pi alpha S_j) with S the
    bucket sums of v*Z, so only (h, Z) are sampled. Returns (error, standard error).
    """
    rng = np.random.default_rng(rng_seed)
    e = _entries(v)
    hs = family.evaluate_batch(random_seeds(family.seed_length, trials, rng))
    zs = signs.sample(trials, rng).astype(np.float64)
    vals = np.empty(trials)
    for r in range(trials):
        S = np.bincount(hs[r], weights=e * zs[r], minlength=family.m)
        vals[r] = np.prod(np.cos(2 * np.pi * alpha * S))
    ref = math.cos(2 * math.pi * alpha) ** int(np.count_nonzero(e))
    return abs(math.fsum(vals) / trials - ref), float(vals.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0


@dataclass
class MomentCheck:
    kind: str
    instance: dict
    moments: dict
    reference: dict
    fitted_constant: dict
    trials: int
    rng_seed: object
    exhaustive: bool = False
    notes: str = ""


def _family_seeds(family, trials, rng):
    if trials is None:
        return all_seeds(family.seed_length), True
    return random_seeds(family.seed_length, trials, rng), False


def moment_probe(kind, instance, p_list, trials, rng_seed):
    """Empirical moments for one of the hashing/norm statistics.

    kind:
      "hv"      instance {v, family}: E[h(v)^p] over family members
      "bucket"  instance {v, family, bucket}: E|l1 mass in bucket - l1/m|^p
      "l2"      instance {v, h, m}: E over uniform x of ||project||_2^2 (p ignored)
      "q2"      instance {v, h, m, alpha}: E[Q2(X)^p], Q2 = alpha^2 (sum S_j^2 - T)
      "q4"      instance {v, h, m, alpha}: E[Q4(X)^p], Q4 = alpha^4 sum S_j^4
      "norm"    instance {v, family, signs}: E[(||v||^2 - ||v D(x) A(h)^T||^2)^p]
    ``trials=None`` enumerates every seed (or every x) instead of sampling.
    The reference bound is evaluated with constant 1 and the implied
    constant needed to make it hold is reported per p.
    """
    rng = np.random.default_rng(rng_seed)
    for p in p_list:
        if p < 2 or p % 2:
            raise ConfigurationError("moment orders must be even integers >= 2")
    v = _entries(instance["v"])
    l2, l4 = float(np.linalg.norm(v)), float(((v ** 4).sum()) ** 0.25)
    moments, reference, fitted = {}, {}, {}
    exhaustive = trials is None
    if kind == "hv":
        fam = instance["family"]
        seeds, exhaustive = _family_seeds(fam, trials, rng)
        vals = np.array([hv_statistic(v, h, fam.m) for h in fam.evaluate_batch(seeds)])
        delta = fam.declared_bias
        for p in p_list:
            mom = float(np.mean(vals ** p))
            base = p ** (2 * p) * ((l2 ** 4 / fam.m) ** p + l4 ** (4 * p))
            extra = fam.m ** p * l2 ** (4 * p) * delta
            moments[p] = mom
            reference[p] = base + extra
            fitted[p] = max(0.0, (mom - extra) / base) ** (1 / (2 * p)) if base > 0 else 0.0
    elif kind == "bucket":
        fam, j = instance["family"], instance.get("bucket", 0)
        seeds, exhaustive = _family_seeds(fam, trials, rng)
        a = np.abs(v)
        dev = np.array([a[h == j].sum() - a.sum() / fam.m for h in fam.evaluate_batch(seeds)])
        for p in p_list:
            mom = float(np.mean(np.abs(dev) ** p))
            extra = a.sum() ** p * fam.declared_bias
            base = p ** (p / 2) * l2 ** p
            moments[p] = mom
            reference[p] = base + extra
            fitted[p] = max(0.0, (mom - extra) / base) ** (2 / p) if base > 0 else 0.0
    elif kind == "l2":
        h, m = np.asarray(instance["h"]), instance["m"]
        n = len(v)
        if exhaustive:
            xs = (1 - 2 * all_seeds(n).astype(np.float64))
        else:
            xs = 1 - 2 * random_seeds(n, trials, rng).astype(np.float64)
        A = np.zeros((m, n))
        A[h, np.arange(n)] = 1.0
        proj = (xs * v) @ A.T
        moments[2] = math.fsum((proj ** 2).sum(axis=1)) / len(xs)
        reference[2] = l2 ** 2
        fitted[2] = moments[2] / reference[2] if reference[2] else 0.0
    elif kind == "q2":
        h, m, alpha = np.asarray(instance["h"]), instance["m"], instance["alpha"]
        n = len(v)
        xs = 1 - 2 * (all_seeds(n) if exhaustive else random_seeds(n, trials, rng)).astype(np.float64)
        A = np.zeros((m, n))
        A[h, np.arange(n)] = 1.0
        S = (xs * v) @ A.T
        q2 = alpha ** 2 * ((S ** 2).sum(axis=1) - l2 ** 2)
        norm = alpha ** 2 * math.sqrt(2 * (hv_statistic(v, h, m) - float((v ** 4).sum())))
        for p in p_list:
            mom = float(np.mean(q2 ** p))
            moments[p] = mom
            reference[p] = (p - 1) ** p * norm ** p
            fitted[p] = mom / reference[p] if reference[p] > 0 else 0.0
    elif kind == "q4":
        h, m, alpha = np.asarray(instance["h"]), instance["m"], instance["alpha"]
        n = len(v)
        xs = 1 - 2 * (all_seeds(n) if exhaustive else random_seeds(n, trials, rng)).astype(np.float64)
        A = np.zeros((m, n))
        A[h, np.arange(n)] = 1.0
        q4 = alpha ** 4 * (((xs * v) @ A.T) ** 4).sum(axis=1)
        l2q = math.sqrt(float(np.mean(q4 ** 2)))
        for p in p_list:
            mom = float(np.mean(q4 ** p))
            moments[p] = mom
            reference[p] = (p - 1) ** (2 * p) * l2q ** p
            fitted[p] = mom / reference[p] if reference[p] > 0 else 0.0
    elif kind == "norm":
        fam, signs = instance["family"], instance["signs"]
        seeds, exhaustive = _family_seeds(fam, trials, rng)
        hs = fam.evaluate_batch(seeds)
        xs = signs.sample(len(hs), rng).astype(np.float64)
        diffs = np.array([l2 ** 2 - float((bucket_vector(v * x, h, fam.m) ** 2).sum()) for h, x in zip(hs, xs)])
        for p in p_list:
            mom = float(np.mean(diffs ** p))
            base = p ** (2 * p) * ((l2 ** 4 / fam.m) ** (p / 2) + l4 ** (2 * p))
            moments[p] = mom
            reference[p] = base
            fitted[p] = (mom / base) ** (1 / (2 * p)) if base > 0 else 0.0
    else:
        raise ConfigurationError(f"unknown moment kind {kind!r}")
    desc = {"n": len(v), "l2": l2, "l4": l4}
    return MomentCheck(kind, desc, moments, reference, fitted, len(xs) if kind in ("l2", "q2", "q4") else
                       (trials or 0), rng_seed, exhaustive)


# ------------------------------------------------------------ product of cosines

@lru_cache(maxsize=None)
def _bernoulli_even(upto):
    """Exact B_0..B_upto via the standard recurrence."""
    B = [Fraction(0)] * (upto + 1)
    B[0] = Fraction(1)
    for m in range(1, upto + 1):
        B[m] = -sum(math.comb(m + 1, k) * B[k] for k in range(m)) / (m + 1)
    return tuple(B)


EXACT_COEFF_LIMIT = 32


@lru_cache(maxsize=None)
def log_cos_rational(j):
    """Coefficient of x^{2j} in log cos(x) as an exact fraction (j <= 32)."""
    if not 1 <= j <= EXACT_COEFF_LIMIT:
        raise ConfigurationError(f"exact coefficients cover 1 <= j <= {EXACT_COEFF_LIMIT}")
    B2j = _bernoulli_even(2 * EXACT_COEFF_LIMIT)[2 * j]
    return (-1) ** j * Fraction(2 ** (2 * j - 1) * (2 ** (2 * j) - 1)) * B2j / (j * math.factorial(2 * j))


def log_cos_coeff(j):
    """c_j with log cos(2 pi u) = sum_j c_j u^{2j}."""
    if j <= EXACT_COEFF_LIMIT:
        return float(log_cos_rational(j)) * (2 * math.pi) ** (2 * j)
    # |B_2j| = 2 (2j)! zeta(2j) / (2 pi)^{2j}
    return -(4.0 ** j) * (4.0 ** j - 1) * 2 * float(special.zeta(2 * j)) / (2 * j)


def log_cos_growth(J):
    """Smallest K with |c_j| <= K^j for j <= J."""
    return max(abs(log_cos_coeff(j)) ** (1 / j) for j in range(1, J + 1))


@dataclass
class CosineApproxInstance:
    S: np.ndarray
    T: float
    alpha: float
    p: int
    coeffs: list = field(default_factory=list)
    pj: dict = field(default_factory=dict)

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        if self.p < 2 or self.p % 2:
            raise ConfigurationError("p must be an even integer >= 2")
        J = max(1, self.p // 2 - 1)
        self.coeffs = [log_cos_coeff(j) for j in range(1, J + 1)]
        self.pj = {j: -(-self.p // (2 * j)) for j in range(1, J + 1)}

    @property
    def quad(self):
        return self.alpha ** 2 * (math.fsum(self.S ** 2) - self.T)

    @property
    def quart(self):
        return math.fsum((self.alpha * self.S) ** 4)


def _exp_head(x, terms):
    return math.fsum(x ** t / math.factorial(t) for t in range(terms))


def _exp_tail(x, terms):
    """e^x minus its first ``terms`` Taylor terms, summed directly."""
    out, t = [], terms
    term = x ** t / math.factorial(t)
    while True:
        out.append(term)
        t += 1
        term = term * x / t
        if abs(term) < 1e-300 or abs(term) < 1e-18 * abs(out[0]) and t > terms + 5:
            break
    return math.fsum(out)


def _truncated_product(A, pj, p):
    """Sum of prod_j A_j^{t_j}/t_j! over t_j < p_j and sum 2j t_j <= p, minus the constant term."""
    poly = np.zeros(p + 1)
    poly[0] = 1.0
    for j, a in A.items():
        nxt = np.zeros(p + 1)
        for t in range(pj[j]):
            w = 2 * j * t
            if w > p:
                break
            coef = a ** t / math.factorial(t)
            nxt[w:] += coef * poly[:p + 1 - w]
        poly = nxt
    return math.fsum(poly[1:])


def _log_cos_residual(u):
    """log cos(2 pi u) + 2 pi^2 u^2, summed from its Taylor series (|u| < 1/4)."""
    u2 = u * u
    acc, j, pw = [], 2, u2 * u2
    while True:
        term = log_cos_coeff(j) * pw
        acc.append(term)
        if abs(term) < 1e-18 * abs(acc[0]) or j > 200:
            break
        j += 1
        pw *= u2
    return math.fsum(acc)


def cosine_product_approx(inst):
    """Polynomial approximation to prod_j cos(2 pi alpha S_j).

    approx = exp(-2 pi^2 alpha^2 T) * E(x) * P with x = -2 pi^2 Q2, E the
    exponential series cut after p/2 terms, and P the total-degree <= p
    part of prod_{j>=2} (exp series of c_j sum_i (alpha S_i)^{2j} cut after
    p_j = ceil(p/(2j)) terms). The error is evaluated as a sum of the two
    truncation residues so that it stays accurate far below 1e-16.
    Returns (approx, true, terms).
    """
    a, S, p = inst.alpha, inst.S, inst.p
    u = a * S
    if np.any(np.abs(u) >= 0.25):
        raise ConfigurationError("need |alpha S_i| < 1/4 for the series evaluation")
    if len(S) * p > 1 << 20:
        raise CapacityError("instance too large")
    q2, q4 = inst.quad, inst.quart
    x = -2 * math.pi ** 2 * q2
    scale = math.exp(-2 * math.pi ** 2 * a * a * inst.T)
    A = {j: inst.coeffs[j - 1] * math.fsum(u ** (2 * j)) for j in range(2, p // 2)}
    P_minus_1 = _truncated_product(A, inst.pj, p) if A else 0.0
    rho = math.fsum(_log_cos_residual(float(ui)) for ui in u)
    head = _exp_head(x, p // 2)
    approx = scale * head * (1.0 + P_minus_1)
    true = scale * math.exp(x) * math.exp(rho)
    # true - approx = scale * [ (e^x - head) e^rho + head (e^rho - P) ]
    err = scale * (_exp_tail(x, p // 2) * math.exp(rho) + head * (math.expm1(rho) - P_minus_1))
    terms = {
        "quad_half": abs(q2) ** (p / 2),
        "quad_full": abs(q2) ** p,
        "quart_eighth": q4 ** (p / 8),
        "quart_half": q4 ** (p / 2),
    }
    terms["bound"] = math.fsum(terms.values())
    terms["error"] = abs(err)
    terms["direct_true"] = float(np.prod(np.cos(2 * np.pi * u)))
    return approx, true, terms


def random_cosine_instance(rng, p, a=0.01, max_m=40):
    """Random instance with max alpha|S_i| < 1/10 and both statistics below a."""
    while True:
        m = int(rng.integers(1, max_m + 1))
        S = rng.standard_normal(m) * rng.uniform(0.2, 5.0)
        T = float((S ** 2).sum() * (1 + rng.uniform(-0.5, 0.5) * rng.random()))
        amax = 0.1 / max(np.abs(S).max(), 1e-12)
        alpha = amax * rng.uniform(0.01, 1.0) ** 2
        inst = CosineApproxInstance(S, T, alpha, p)
        if abs(inst.quad) < a and inst.quart < a:
            return inst


def cosine_corpus(count, rng_seed, a=0.01, max_m=40):
    """Instances shared across p: (S, T, alpha) triples."""
    rng = np.random.default_rng(rng_seed)
    return [random_cosine_instance(rng, 2, a, max_m) for _ in range(count)]


def fit_cosine_constant(corpus, p):
    """Smallest K with error <= K^p * bound on every instance, plus the worst instance index."""
    worst, arg = 0.0, -1
    for idx, base in enumerate(corpus):
        inst = CosineApproxInstance(base.S, base.T, base.alpha, p)
        _, _, terms = cosine_product_approx(inst)
        if terms["bound"] <= 0:
            continue
        r = (terms["error"] / terms["bound"]) ** (1 / p)
        if r > worst:
            worst, arg = r, idx
    return worst, arg


# ------------------------------------------------------------ norm trajectories

def norm_trajectory(v, schedule, rng_seed):
    """Norms (l2, l4, l0) of v_1 = v, v_{i+1} = v_i D(Z_i) A(h_i)^T along one sampled trajectory.

    ``schedule`` supplies ``stage_families(i)`` -> (hash family, sign
    generator) for each stage i of its ``stages``.
    """
    rng = np.random.default_rng(rng_seed)
    cur = _entries(v).copy()
    out = [(float(np.linalg.norm(cur)), float((cur ** 4).sum() ** 0.25), int(np.count_nonzero(cur)))]
    for i in range(schedule.stages):
        fam, signs = schedule.stage_families(i)
        h = fam.evaluate_batch(random_seeds(fam.seed_length, 1, rng))[0]
        z = signs.sample(1, rng)[0].astype(np.float64)
        cur = bucket_vector(cur * z, h, fam.m)
        out.append((float(np.linalg.norm(cur)), float((cur ** 4).sum() ** 0.25), int(np.count_nonzero(cur))))
    return out


def norm_bounds(v, schedule):
    """Per-stage bounds 2^i ||v||_2 and ||v||_2 / min(||v||_2^{1/3}, n_i^{1/20}) for i = 1..t."""
    l2 = float(np.linalg.norm(_entries(v)))
    sizes = schedule.sizes
    return [(2.0 ** (i + 1) * l2, l2 / min(l2 ** (1 / 3), sizes[i] ** (1 / 20))) for i in range(len(sizes))]
