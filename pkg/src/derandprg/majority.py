"""Generators fooling signed majorities sgn(<v, x> - theta) for v in {0,+-1}^n.

Two generators are multiplied coordinate-wise:

* the large-frequency generator hashes coordinates into buckets with a
  spreading family and fills bucket j from base-generator seed z_j, the
  seeds z_1..z_m coming from the branching-program generator;
* the small-frequency generator iterates "hash into fewer buckets, flip
  each coordinate by a limited-independence sign" down a schedule of
  sizes n_1 > n_2 > ... > n_t and finishes with a base-generator string.

The base generator is a pluggable slot. Its default is k-wise
independent bits, with k calibrated against the exact law of v.X.
"""
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit

from . import gf2
from .analysis import (DistributionTable, WeightVector, affine_structure, exact_sum_distribution,
                       fourier_coeff, linear_sum_distribution, reduce_alpha, tv_distance, tv_sampling_slack)
from .core import ConstantGenerator, Generator, XorCombined, random_seeds
from .errors import CalibrationError, CapacityError, ConfigurationError
from .hashing import BitDistribution, KwiseFamily, SpreadingFamily, combined_bits, next_pow2
from .inw import INWGenerator, _get_field


# ------------------------------------------------------------ Fourier tests

@dataclass
class FourierTest:
    """phi(x) = exp(2 pi i alpha <v, x>) for a {0,+-1} vector v."""

    alpha: float
    v: WeightVector
    reduced: float = field(init=False)
    factor: int = field(init=False)

    def __post_init__(self):
        if not isinstance(self.v, WeightVector):
            self.v = WeightVector(self.v)
        if not self.v.signed:
            raise ConfigurationError("Fourier tests need a vector with entries in {0, +-1}")
        self.reduced, self.factor = reduce_alpha(self.alpha, self.v.l0)

    def uniform_value(self):
        """E[phi(X)] for uniform X, which is cos(2 pi alpha)^K with K = ||v||_0."""
        return math.cos(2 * math.pi * self.alpha) ** self.v.l0

    def dots(self, outputs):
        return np.asarray(outputs, dtype=np.float64) @ self.v.entries

    def estimate(self, dots):
        """Empirical E[phi] from precomputed <v, y> values."""
        return fourier_coeff(np.asarray(dots), self.alpha)

    def gap(self, dots):
        return abs(self.estimate(dots) - self.uniform_value())


# ------------------------------------------------------------ base generator slot

@njit(cache=True)
def _kwise_gather(words, row_of, k, poly, f, offset, mu, exp, log, out):
    """out[b, i] = sign of the low bit of the polynomial in seed row row_of[b, i], evaluated at i + offset.

    Coefficient t of a row is bits [t f, (t+1) f) of its packed words.
    """
    order = (1 << f) - 1
    hw = gf2.HAVE_CLMUL and f <= 32
    for b in range(out.shape[0]):
        for i in range(out.shape[1]):
            w = words[row_of[b, i]]
            x = np.uint64(i + offset)
            acc = np.uint64(0)
            for t in range(k - 1, -1, -1):
                if hw:
                    acc = gf2.mul_barrett(acc, x, f, poly, mu)
                elif acc != 0:
                    acc = np.uint64(exp[(np.int64(log[acc]) + np.int64(log[x])) % order])
                acc ^= _get_field(w, t * f, f)
            out[b, i] = 1 - 2 * np.int8(acc & np.uint64(1))


class KwiseBase(BitDistribution):
    """k-wise independent sign bits used as a base generator.

    ``gather`` evaluates coordinate i from seed row row_of[b, i] without
    expanding the other coordinates of each row.
    """

    def __init__(self, n, k, certificate=None):
        super().__init__(base_family(n, k), label=f"kwise-base(n={n},k={k})")
        self.k = k
        self.certificate = certificate

    def gather(self, words, row_of):
        """Outputs picking coordinate i from packed seed row row_of[b, i]."""
        fam = self.family
        if fam.field_bits > 32 and fam.field_bits > gf2.TABLE_BITS:
            raise CapacityError("gathered evaluation supports fields of at most 32 bits")
        out = np.empty(row_of.shape, np.int8)
        _kwise_gather(np.ascontiguousarray(words), np.asarray(row_of, np.int64), self.k, np.uint64(fam.poly),
                      fam.field_bits, fam.offset, np.uint64(fam.mu), fam._exp, fam._log, out)
        return out

    def params(self):
        d = {"k": self.k, "family": self.family.descriptor()}
        if self.certificate is not None:
            d["certificate"] = self.certificate.summary()
        return d


@dataclass
class ConformanceCertificate:
    """What calibration established about a base generator.

    ``exact_all`` means the chosen k makes every coordinate set exactly
    uniform, so the bound holds for every v. Otherwise the bound was
    checked on the recorded probe vectors only, each probe either with the
    exact law of v.Y or with a sampled law plus a 99% slack.
    """

    n: int
    eps: float
    k: int
    field_bits: int
    seed_length: int
    full_rank_k: int
    exact_all: bool
    worst: float
    rng_seed: int
    samples: int
    probes: list
    rejected: list

    def summary(self):
        return {k: v for k, v in asdict(self).items() if k not in ("probes", "rejected")}

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        _atomic_write(path, self.to_json() + "\n")


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def base_family(n, k):
    """k-wise bits evaluated at the points c, c+1, ..., c+n-1 with c = 0b0101...

    Sums of x^t over an additive subgroup vanish for small t, so the
    points 0..n-1 with n a power of two fix the parity of the all-ones
    test for every k < n. A field with one spare bit and an alternating
    offset keeps the point set far from any subgroup or coset.
    """
    f = gf2.bits_for(max(n, 2)) + 1
    return KwiseFamily(n, 2, k, f, offset=((1 << f) - 1) // 3)


@njit(cache=True)
def _lsb_columns(n, t, f, poly, offset, out):
    """out[j, i] = low bit of x^j * (i + offset)^t, the seed column of coefficient t, bit j."""
    for i in range(n):
        p = gf2.nb_pow(np.uint64(i + offset), t, poly, f)
        for j in range(f):
            out[j, i] = np.uint8(p & np.uint64(1))
            p = gf2.nb_mul(p, np.uint64(2), poly, f)


def full_rank_k(n):
    """Smallest k at which the base bits are uniform on all n coordinates."""
    fam = base_family(n, 1)
    f = fam.field_bits
    cols = np.zeros((f, n), np.uint8)
    rows, k = {}, 0
    while len(rows) < n:
        _lsb_columns(n, k, f, np.uint64(fam.poly), fam.offset, cols)
        for j in range(f):
            v = int.from_bytes(np.packbits(cols[j], bitorder="little").tobytes(), "little")
            for piv, r in rows.items():
                if v >> piv & 1:
                    v ^= r
            if v:
                piv = v.bit_length() - 1
                for p2 in list(rows):
                    if rows[p2] >> piv & 1:
                        rows[p2] ^= v
                rows[piv] = v
        k += 1
    return k


def probe_vectors(n, count, rng_seed):
    """Structured and random {0,+-1} probes: all ones, alternating, and random ones on a density ladder."""
    rng = np.random.default_rng(rng_seed)
    out = [np.ones(n), np.where(np.arange(n) % 2, -1.0, 1.0)]
    ladder = sorted({min(n, 1 << j) for j in range(n.bit_length() + 1)} | {n})
    j = 0
    while len(out) < count:
        d = ladder[j % len(ladder)]
        out.append(WeightVector.random_signed(n, d, rng).entries.copy())
        j += 1
    return [WeightVector(v) for v in out[:max(count, 1)]]


def _probe_distance(gen, M, c, v, eps, samples, sampled):
    """(dtv or None, method, slack) for one probe against the exact uniform law.

    ``sampled`` is a zero-argument callable returning a shared batch of
    outputs, drawn only if some probe needs it.
    """
    ent = v.entries
    sup = np.nonzero(ent)[0]
    ref = exact_sum_distribution(v)
    law = linear_sum_distribution(M[sup], c[sup], ent[sup])
    if law is not None:
        return tv_distance(law, ref), "exact", 0.0
    slack = tv_sampling_slack(len(ref), samples)
    if slack >= eps:
        return None, "untestable", slack
    emp = DistributionTable.from_samples(np.rint(sampled() @ ent))
    return tv_distance(emp, ref), "sampled", slack


def calibrate_base(n, eps, probes=24, samples=20000, rng_seed=0, k_max=None):
    """Smallest passing k found by doubling then bisection, with its certificate.

    The first k at which the bits are uniform on all n coordinates passes
    unconditionally, so calibration only fails when ``k_max`` stops the
    search before that point. Pass/fail need not be monotone in k; the
    bisection assumes it and every tested k is recorded.
    """
    if n < 1:
        raise ConfigurationError("n must be positive")
    if not 0 < eps < 1:
        raise ConfigurationError("eps must lie in (0, 1)")
    k_full = full_rank_k(n)
    k_top = k_full if k_max is None else min(k_max, k_full)
    vs = probe_vectors(n, probes, rng_seed)
    rng = np.random.default_rng(rng_seed)
    rejected, passed = [], {}

    def attempt(k):
        gen = KwiseBase(n, k)
        if k == k_full:
            passed[k] = (gen, [{"l0": v.l0, "dtv": 0.0, "method": "uniform", "slack": 0.0} for v in vs])
            return True
        M, c = affine_structure(gen)
        cache = []

        def sampled():
            if not cache:
                cache.append(gen.expand_batch(random_seeds(gen.seed_length, samples, rng)).astype(np.float64))
            return cache[0]

        records = []
        for v in vs:
            d, method, slack = _probe_distance(gen, M, c, v, eps, samples, sampled)
            records.append({"l0": v.l0, "dtv": d, "method": method, "slack": slack})
            if d is None or d + slack > eps:
                rejected.append({"k": k, "failing_probe": records[-1]})
                return False
        passed[k] = (gen, records)
        return True

    lo, hi = 0, None
    k = 1
    while k <= k_top:
        if attempt(k):
            hi = k
            break
        lo = k
        k = k_top if 2 * k > k_top and k < k_top else 2 * k
    if hi is None:
        raise CalibrationError(f"no k <= {k_top} reaches dtv {eps:.3g} at n={n}; uniform bits need k={k_full}")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if attempt(mid):
            hi = mid
        else:
            lo = mid
    gen, records = passed[hi]
    worst = max(r["dtv"] + r["slack"] for r in records)
    gen.certificate = ConformanceCertificate(n, eps, hi, gen.family.field_bits, gen.seed_length, k_full,
                                             hi == k_full, worst, rng_seed, samples, records, rejected)
    return gen


@lru_cache(maxsize=64)
def _cached_base(n, eps, probes, samples, rng_seed):
    return calibrate_base(n, eps, probes, samples, rng_seed)


def base_generator(n, eps, probes=24, samples=20000, rng_seed=0):
    """Generator whose sums v.Y are within eps of v.X in total variation for {0,+-1} vectors v."""
    if eps >= 1:
        return ConstantGenerator(np.ones(n, np.int8))
    return _cached_base(n, float(eps), probes, samples, rng_seed)


# ------------------------------------------------------------ large frequencies

def sum_state_bits(n):
    """State bits of a program tracking a running sum in [-n, n]."""
    return max(1, math.ceil(math.log2(2 * n + 1)))


class LargeAlphaGenerator(Generator):
    """Coordinate i is G_cs(z_{h(i)})_i with h spreading and z_1..z_m from the block generator.

    Seed: spreading hash seed, then the block generator seed. The bucket
    count is capped at ``max_buckets``, by default the next power of two
    at or above n, since more buckets than coordinates add nothing.
    """

    def __init__(self, n, eps, base=None, c_spread=1.0, C_spread=3.0, max_buckets=None, hash_family=None,
                 inw_budget=None):
        if not 0 < eps < 1:
            raise ConfigurationError("eps must lie in (0, 1)")
        self.n, self.eps = n, eps
        self.base = base if base is not None else base_generator(n, 0.25)
        if self.base.output_length != n:
            raise ConfigurationError("base generator length does not match n")
        self.hash = hash_family or SpreadingFamily(n, eps, c_spread, C_spread, max_buckets or next_pow2(n))
        self.m = self.hash.m
        self.rh = self.hash.seed_length
        self.S = sum_state_bits(n)
        D = self.base.seed_length
        self.inw = INWGenerator(self.S, D, self.m, eps / 4, inw_budget) if D > 0 else None
        self.seed_length = self.rh + (self.inw.seed_length if self.inw else 0)
        self.output_length = n
        self.label = f"large(n={n},eps={eps:.3g},m={self.m})"

    def bucket_seeds(self, seeds):
        """(B, m, D) base seeds."""
        return self.inw.blocks_batch(seeds[:, self.rh:])

    def _batch(self, seeds):
        if self.inw is None:
            return self.base.expand_batch(np.zeros((len(seeds), 0), np.uint8))
        h = self.hash.evaluate_batch(seeds[:, :self.rh])
        B = len(seeds)
        row_of = np.arange(B)[:, None] * self.m + h
        if isinstance(self.base, KwiseBase):
            words = self.inw.block_words(seeds[:, self.rh:]).reshape(B * self.m, -1)
            return self.base.gather(words, row_of)
        return self._gather_full(self.bucket_seeds(seeds).reshape(B * self.m, -1), row_of)

    def _gather_full(self, rows, row_of):
        full = self.base.expand_batch(rows)
        return full[row_of, np.arange(self.n)[None, :]]

    def compose_batch(self, seeds):
        """Reference path: expand every bucket's base seed in full, then pick coordinates."""
        seeds = np.asarray(seeds, dtype=np.uint8)
        if self.inw is None:
            return self._batch(seeds)
        h = self.hash.evaluate_batch(seeds[:, :self.rh])
        rows = self.bucket_seeds(seeds).reshape(len(seeds) * self.m, -1)
        return self._gather_full(rows, np.arange(len(seeds))[:, None] * self.m + h)

    def children(self):
        return [self.base] + ([self.inw] if self.inw else [])

    def params(self):
        return {"eps": self.eps, "m": self.m, "S": self.S, "hash": self.hash.descriptor()}


def large_alpha_prg(n, eps, **kw):
    return LargeAlphaGenerator(n, eps, **kw)


# ------------------------------------------------------------ small frequencies

class SmallAlphaSchedule:
    """Sizes, independence and bias of the small-frequency generator.

    With L = log2(n/delta): n_1 = n and n_{i+1} is the next power of two
    at or above sqrt(n_i), stopping once n_i <= L^(2C). Stage i hashes
    [n_i] -> [n_{i+1}] with k_i = ceil(C L / log2 n_i) independence and
    signs that are k_i-wise and (delta/n)^C-biased. The last string is a
    base generator at error delta/n.
    """

    def __init__(self, n, delta, C=4, base_kw=None):
        if n < 1:
            raise ConfigurationError("n must be positive")
        if not 0 < delta < 1:
            raise ConfigurationError("delta must lie in (0, 1)")
        self.n, self.delta, self.C = n, delta, C
        self.L = math.log2(n / delta)
        self.window = (self.L ** C, self.L ** (2 * C))
        sizes = [n]
        while sizes[-1] > self.window[1]:
            nxt = next_pow2(math.ceil(math.sqrt(sizes[-1])))
            if nxt >= sizes[-1]:
                break
            sizes.append(nxt)
        self.sizes = sizes
        self.t = len(sizes)
        self.independence = [max(1, math.ceil(C * self.L / math.log2(s))) for s in sizes[:-1]]
        self.bias = (delta / n) ** C
        self.final_error = delta / n
        self.in_window = self.window[0] <= sizes[-1] <= self.window[1]
        self._families = [None] * self.stages
        self.base_kw = dict(base_kw or {})

    @property
    def stages(self):
        return self.t - 1

    def stage_families(self, i):
        """(hash family [n_i] -> [n_{i+1}], sign generator on n_i coordinates) for stage i (0-based)."""
        if not 0 <= i < self.stages:
            raise ConfigurationError(f"stage {i} outside [0, {self.stages})")
        if self._families[i] is None:
            a, b, k = self.sizes[i], self.sizes[i + 1], self.independence[i]
            self._families[i] = (KwiseFamily(a, b, k), combined_bits(a, self.bias, k))
        return self._families[i]

    def final_base(self):
        return base_generator(self.sizes[-1], self.final_error, **self.base_kw)

    def to_dict(self):
        return {"n": self.n, "delta": self.delta, "C": self.C, "sizes": self.sizes, "t": self.t,
                "independence": self.independence, "bias": self.bias, "final_error": self.final_error,
                "window": list(self.window), "in_window": self.in_window}


class SmallAlphaGenerator(Generator):
    """Y = Z A(h_{t-1}) D(Z_{t-1}) ... A(h_1) D(Z_1).

    Seed: for each stage its hash seed then its sign seed, then the final
    base seed. Coordinate i is Z[i_t] times Z_l[i_l] over the stages,
    where i_1 = i and i_{l+1} = h_l(i_l).
    """

    def __init__(self, schedule):
        self.schedule = schedule
        self.families = [schedule.stage_families(i) for i in range(schedule.stages)]
        self.final = schedule.final_base()
        offs, pos = [], 0
        for fam, sgn in self.families:
            offs.append((pos, pos + fam.seed_length))
            pos += fam.seed_length + sgn.seed_length
        self.offsets = offs
        self.final_off = pos
        self.seed_length = pos + self.final.seed_length
        self.output_length = schedule.n
        self.label = f"small(n={schedule.n},delta={schedule.delta:.3g},t={schedule.t})"

    def stage_values(self, seeds):
        """Per stage (h (B, n_i), Z (B, n_i)) and the final string (B, n_t)."""
        out = []
        for (fam, sgn), (ho, so) in zip(self.families, self.offsets):
            h = fam.evaluate_batch(seeds[:, ho:ho + fam.seed_length])
            z = sgn.expand_batch(seeds[:, so:so + sgn.seed_length])
            out.append((h, z))
        last = self.final.expand_batch(seeds[:, self.final_off:])
        return out, last

    def _batch(self, seeds):
        return self.trajectory_batch(seeds)

    def trajectory_batch(self, seeds):
        stages, last = self.stage_values(seeds)
        B = len(seeds)
        rows = np.arange(B)[:, None]
        idx = np.broadcast_to(np.arange(self.output_length), (B, self.output_length))
        sign = np.ones((B, self.output_length), np.int8)
        for h, z in stages:
            sign = sign * z[rows, idx]
            idx = h[rows, idx]
        return (sign * last[rows, idx]).astype(np.int8)

    def matrix_batch(self, seeds):
        """Same output by multiplying the explicit matrices A(h) and D(Z), right to left from Z."""
        stages, last = self.stage_values(seeds)
        out = np.empty((len(seeds), self.output_length), np.int8)
        for b in range(len(seeds)):
            y = last[b].astype(np.int64)
            for h, z in reversed(stages):
                hb = h[b]
                A = np.zeros((len(y), len(hb)), np.int64)
                A[hb, np.arange(len(hb))] = 1
                y = (y @ A) @ np.diag(z[b].astype(np.int64))
            out[b] = y
        return out

    def children(self):
        return [sgn for _, sgn in self.families] + [self.final]

    def params(self):
        return {"schedule": self.schedule.to_dict(),
                "hashes": [fam.descriptor() for fam, _ in self.families]}


def small_alpha_prg(n, delta, C=4, base_kw=None):
    return SmallAlphaGenerator(SmallAlphaSchedule(n, delta, C, base_kw))


# ------------------------------------------------------------ combination

class SignedMajorityGenerator(XorCombined):
    """Coordinate-wise product of the large- and small-frequency generators, each at error eps/(6n)."""

    def __init__(self, n, eps, C=4, large_kw=None, base_kw=None):
        if not 0 < eps < 1:
            raise ConfigurationError("eps must lie in (0, 1)")
        self.n, self.eps = n, eps
        self.delta = eps / (6 * n)
        self.large = LargeAlphaGenerator(n, self.delta, **(large_kw or {}))
        self.small = small_alpha_prg(n, self.delta, C, base_kw)
        super().__init__(self.large, self.small)
        self.label = f"signed-majority(n={n},eps={eps:.3g})"

    def params(self):
        return {"eps": self.eps, "delta": self.delta}


def signed_majority_prg(n, eps, C=4, large_kw=None, base_kw=None):
    return SignedMajorityGenerator(n, eps, C, large_kw, base_kw)
