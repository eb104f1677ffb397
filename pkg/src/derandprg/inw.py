"""Read-once branching programs, a recursive generator that fools them, and
the compiler from weighted sums to branching programs.

A program has T layers. Layer l maps (state, block) to the next state,
where a block is D input bits read as a little-endian integer. States are
0 .. 2^S - 1.
"""
import json
import math
import os
import struct
import tempfile

import numpy as np
from numba import njit

from . import gf2
from .core import Generator, all_seeds, bits_to_signs
from .errors import CapacityError, ConfigurationError

MAGIC = b"ROBPv001"
MAX_DENSE_STATE_BITS = 24


# ------------------------------------------------------------ programs

class ROBP:
    """Dense layered program: ``layers[l, state, block]`` is the next state."""

    def __init__(self, S, D, layers, start=0, accepting=None, provenance=None):
        layers = np.asarray(layers)
        if S > MAX_DENSE_STATE_BITS:
            raise CapacityError(f"dense tables limited to {MAX_DENSE_STATE_BITS} state bits")
        if layers.ndim != 3 or layers.shape[1:] != (1 << S, 1 << D):
            raise ConfigurationError(f"layers must have shape (T, {1 << S}, {1 << D})")
        if layers.size and (layers.min() < 0 or layers.max() >= 1 << S):
            raise ConfigurationError("transition lands outside the state range")
        if not 0 <= start < 1 << S:
            raise ConfigurationError("start state outside the state range")
        acc = np.zeros(1 << S, bool)
        if accepting is not None:
            accepting = np.asarray(accepting)
            if accepting.dtype == bool:
                acc[:] = accepting
            else:
                acc[accepting.astype(np.int64)] = True
        self.S, self.D, self.T = S, D, len(layers)
        self.layers = layers.astype(np.int32)
        self.layers.setflags(write=False)
        self.start = int(start)
        self.accepting = acc
        self.accepting.setflags(write=False)
        self.provenance = provenance or {}

    def __eq__(self, other):
        return (isinstance(other, ROBP) and (self.S, self.D, self.start) == (other.S, other.D, other.start)
                and np.array_equal(self.layers, other.layers) and np.array_equal(self.accepting, other.accepting))

    def state_distributions(self):
        """Exact state law after each layer under uniform blocks: (T+1, 2^S) array."""
        dist = np.zeros((self.T + 1, 1 << self.S))
        dist[0, self.start] = 1.0
        w = 1.0 / (1 << self.D)
        for t in range(self.T):
            nxt = np.zeros(1 << self.S)
            np.add.at(nxt, self.layers[t].reshape(-1), np.repeat(dist[t], 1 << self.D) * w)
            dist[t + 1] = nxt
        return dist

    def acceptance_probability(self):
        return float(self.state_distributions()[-1][self.accepting].sum())

    def to_bytes(self):
        head = MAGIC + struct.pack("<IIII", self.S, self.D, self.T, self.start)
        acc = np.packbits(self.accepting.astype(np.uint8), bitorder="little").tobytes()
        return head + self.layers.astype("<u4").tobytes() + acc

    @classmethod
    def from_bytes(cls, blob):
        if blob[:8] != MAGIC:
            raise ConfigurationError("not a serialized program")
        S, D, T, start = struct.unpack("<IIII", blob[8:24])
        size = T * (1 << S) * (1 << D) * 4
        layers = np.frombuffer(blob[24:24 + size], dtype="<u4").reshape(T, 1 << S, 1 << D)
        acc = np.unpackbits(np.frombuffer(blob[24 + size:], np.uint8), count=1 << S, bitorder="little")
        return cls(S, D, layers.astype(np.int64), start, acc.astype(bool))

    def save(self, path):
        """Binary tables at ``path`` plus a JSON sidecar at ``path + '.json'``."""
        _atomic_write(path, self.to_bytes())
        side = {"S": self.S, "D": self.D, "T": self.T, "start": self.start, "provenance": self.provenance}
        _atomic_write(path + ".json", json.dumps(side, sort_keys=True, indent=1).encode())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            M = cls.from_bytes(fh.read())
        side = path + ".json"
        if os.path.exists(side):
            with open(side) as fh:
                M.provenance = json.load(fh).get("provenance", {})
        return M


def _atomic_write(path, data):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


@njit(cache=True)
def _run_batch(layers, start, accepting, blocks, out):
    T = layers.shape[0]
    for b in range(blocks.shape[0]):
        s = start
        for t in range(T):
            s = layers[t, s, blocks[b, t]]
        out[b] = accepting[s]


def blocks_to_ints(bits, D):
    """(B, T*D) or (B, T, D) bits -> (B, T) little-endian block values."""
    bits = np.asarray(bits, dtype=np.int64)
    bits = bits.reshape(len(bits), -1, D)
    return (bits << np.arange(D)).sum(axis=2)


def robp_eval_batch(M, blocks):
    blocks = np.asarray(blocks, dtype=np.int64)
    if blocks.ndim != 2 or blocks.shape[1] != M.T:
        raise ConfigurationError(f"expected (B, {M.T}) block values")
    if blocks.size and (blocks.min() < 0 or blocks.max() >= 1 << M.D):
        raise ConfigurationError("block value outside [0, 2^D)")
    out = np.empty(len(blocks), np.bool_)
    _run_batch(M.layers, M.start, M.accepting, blocks, out)
    return out


def robp_eval(M, blocks):
    """Accept bit on one input given as T block values or T*D bits."""
    blocks = np.asarray(blocks)
    if blocks.size == M.T * M.D and blocks.size != M.T or blocks.ndim == 2:
        blocks = blocks_to_ints(blocks.reshape(1, -1), M.D)[0]
    if len(blocks) != M.T:
        raise ConfigurationError(f"input has {len(blocks)} blocks, expected {M.T}")
    return bool(robp_eval_batch(M, blocks[None, :])[0])


def exhaustive_acceptance(M):
    """Acceptance probability by running every input; only for T*D <= 24."""
    bits = all_seeds(M.T * M.D)
    return float(robp_eval_batch(M, blocks_to_ints(bits, M.D)).mean())


def random_robp(S, D, T, rng, accept_fraction=None):
    layers = rng.integers(0, 1 << S, size=(T, 1 << S, 1 << D))
    frac = rng.uniform(0.2, 0.8) if accept_fraction is None else accept_fraction
    acc = rng.random(1 << S) < frac
    return ROBP(S, D, layers, int(rng.integers(0, 1 << S)), acc, {"kind": "random"})


def robp_corpus(S, D, T, count, rng_seed):
    rng = np.random.default_rng(rng_seed)
    return [random_robp(S, D, T, rng) for _ in range(count)]


# ------------------------------------------------------------ recursive generator

@njit(cache=True, inline="always")
def _get_field(words, start, width):
    """Bits [start, start+width) of a word array, width <= 64."""
    w, s = start >> 6, start & 63
    v = words[w] >> np.uint64(s)
    if s and s + width > 64:
        v |= words[w + 1] << np.uint64(64 - s)
    if width < 64:
        v &= (np.uint64(1) << np.uint64(width)) - np.uint64(1)
    return v


@njit(cache=True)
def _copy_bits(src, start, width, dst):
    """dst[0:ceil(width/64)] <- src bits [start, start+width)."""
    nw = (width + 63) >> 6
    for k in range(nw):
        wd = 64 if k < nw - 1 or width % 64 == 0 else width % 64
        dst[k] = _get_field(src, start + 64 * k, wd)


@njit(cache=True)
def _mix(tw, nt, x, Lh, Ll, acc, y):
    """y = bits [Lh-1, Lh-1+Ll) of the carry-less product t*x."""
    for k in range(acc.shape[0]):
        acc[k] = 0
    for wx in range((Lh + 63) >> 6):
        word = x[wx]
        for s in range(64):
            if word == 0:
                break
            if word & np.uint64(1):
                for k in range(nt):
                    acc[k + wx] ^= tw[k] << np.uint64(s)
                    if s:
                        acc[k + wx + 1] ^= tw[k] >> np.uint64(64 - s)
            word >>= np.uint64(1)
    _copy_bits(acc, Lh - 1, Ll, y)


@njit(cache=True)
def _mix_hw(tw, nt, x, Lh, Ll, acc, y):
    """Same as _mix with the hardware carry-less multiply, computing only the needed words."""
    w0 = (Lh - 1) >> 6
    w1 = (Lh - 1 + Ll + 63) >> 6
    for k in range(w0, w1 + 1):
        acc[k] = 0
    nx = (Lh + 63) >> 6
    for i in range(nx):
        xi = x[i]
        if xi == 0:
            continue
        lo_j = max(0, w0 - 1 - i)
        hi_j = min(nt, w1 + 1 - i)
        for j in range(lo_j, hi_j):
            lo, hi = gf2.clmul128(xi, tw[j])
            acc[i + j] ^= lo
            acc[i + j + 1] ^= hi
    _copy_bits(acc, Lh - 1, Ll, y)


@njit(cache=True)
def _fill_window(tw, nt, tab):
    """tab[v] = t * v (carry-less) for every byte v."""
    for k in range(tab.shape[1]):
        tab[0, k] = 0
    for v in range(1, 256):
        low = v & (-v)
        s = 0
        while (low >> s) != 1:
            s += 1
        prev = v ^ low
        for k in range(tab.shape[1]):
            tab[v, k] = tab[prev, k]
        for k in range(nt):
            tab[v, k] ^= tw[k] << np.uint64(s)
            if s:
                tab[v, k + 1] ^= tw[k] >> np.uint64(64 - s)


@njit(cache=True)
def _mix_window(tab, x, Lh, Ll, acc, y):
    """Same as _mix using a byte-window product table."""
    for k in range(acc.shape[0]):
        acc[k] = 0
    nb = tab.shape[1]
    for q in range((Lh + 7) >> 3):
        v = (x[q >> 3] >> np.uint64(8 * (q & 7))) & np.uint64(255)
        if v == 0:
            continue
        wo = q >> 3
        sh = 8 * (q & 7)
        row = tab[v]
        if sh == 0:
            for k in range(nb):
                acc[k + wo] ^= row[k]
        else:
            for k in range(nb):
                acc[k + wo] ^= row[k] << np.uint64(sh)
                acc[k + wo + 1] ^= row[k] >> np.uint64(64 - sh)
    _copy_bits(acc, Lh - 1, Ll, y)


@njit(cache=True)
def _tree(seedw, L, t_off, b_off, K, out):
    """Full output tree for each packed seed; out is (B, 2^K, words(L_0))."""
    Lmax = L[K]
    nwm = (Lmax + 63) >> 6
    Tn = 1 << K
    cur = np.zeros((Tn, nwm), np.uint64)
    nxt = np.zeros((Tn, nwm), np.uint64)
    ntm = (2 * Lmax + 63) >> 6
    tw = np.zeros(ntm, np.uint64)
    bw = np.zeros(nwm, np.uint64)
    tab = np.zeros((256, ntm + 1), np.uint64)
    acc = np.zeros(ntm + nwm + 2, np.uint64)
    for b in range(seedw.shape[0]):
        sw = seedw[b]
        cur[0, :] = 0
        _copy_bits(sw, 0, L[K], cur[0])
        for lev in range(K, 0, -1):
            Lh = L[lev]
            Ll = L[lev - 1]
            nt = (Lh + Ll - 1 + 63) >> 6
            tw[:] = 0
            _copy_bits(sw, t_off[lev], Lh + Ll - 1, tw)
            bw[:] = 0
            _copy_bits(sw, b_off[lev], Ll, bw)
            nwl = (Ll + 63) >> 6
            nodes = 1 << (K - lev)
            # the byte table pays for itself once a level has a few nodes
            windowed = nodes >= 4 and not gf2.HAVE_CLMUL
            if windowed:
                _fill_window(tw, nt, tab[:, :nt + 1])
            for q in range(nodes - 1, -1, -1):
                nxt[2 * q, :] = 0
                nxt[2 * q + 1, :] = 0
                _copy_bits(cur[q], 0, Ll, nxt[2 * q])
                if windowed:
                    _mix_window(tab[:, :nt + 1], cur[q], Lh, Ll, acc, nxt[2 * q + 1])
                elif gf2.HAVE_CLMUL:
                    _mix_hw(tw, nt, cur[q], Lh, Ll, acc, nxt[2 * q + 1])
                else:
                    _mix(tw, nt, cur[q], Lh, Ll, acc, nxt[2 * q + 1])
                for k in range(nwl):
                    nxt[2 * q + 1, k] ^= bw[k]
            cur, nxt = nxt, cur
        for j in range(Tn):
            for k in range(out.shape[2]):
                out[b, j, k] = cur[j, k]


def pack_words(bits):
    """(B, r) bits -> (B, ceil(r/64)) little-endian uint64 words."""
    bits = np.asarray(bits, dtype=np.uint8)
    B, r = bits.shape
    nw = max(1, (r + 63) // 64)
    padded = np.zeros((B, nw * 64), np.uint8)
    padded[:, :r] = bits
    return np.ascontiguousarray(np.packbits(padded, axis=1, bitorder="little")).view("<u8").astype(np.uint64)


def unpack_words(words, r):
    words = np.ascontiguousarray(words, dtype="<u8")
    by = words.view(np.uint8).reshape(*words.shape[:-1], -1)
    return np.unpackbits(by, axis=-1, count=r, bitorder="little")


def default_budget(S, T, eps):
    return S + max(0, math.ceil(math.log2(T / eps)))


class INWGenerator(Generator):
    """Recursive generator whose output is T blocks of D bits.

    Level lengths are L_0 = D and L_l = L_{l-1} + budget. The seed is x
    (L_K bits) followed, for l = 1..K, by a mixing key t_l of L_l + L_{l-1} - 1
    bits and an offset b_l of L_{l-1} bits. Level l maps x to
    (G_{l-1}(x[:L_{l-1}]), G_{l-1}(E_l(x))) with E_l(x) the middle L_{l-1}
    bits of the carry-less product t_l * x, plus b_l. This map is a
    Toeplitz affine hash, so x -> E_l(x) is pairwise independent.
    Block j follows the bits of j from the most significant: 0 keeps
    the prefix, 1 applies the mixing map. T that is not a power of two is
    padded and the extra blocks are dropped.

    ``budget`` is the entropy allowance per level; the default covers
    S + log2(T/eps).
    """

    def __init__(self, S, D, T, eps, budget=None):
        if S < 0 or D < 1 or T < 1:
            raise ConfigurationError("need S >= 0, D >= 1 and T >= 1")
        if not 0 < eps < 1:
            raise ConfigurationError("eps must lie in (0, 1)")
        self.S, self.D, self.T, self.eps = S, D, T, eps
        self.K = max(0, math.ceil(math.log2(T))) if T > 1 else 0
        self.budget = default_budget(S, 1 << self.K, eps) if budget is None else int(budget)
        self.L = np.array([D + l * self.budget for l in range(self.K + 1)], np.int64)
        t_off = np.zeros(self.K + 1, np.int64)
        b_off = np.zeros(self.K + 1, np.int64)
        pos = int(self.L[-1])
        for l in range(1, self.K + 1):
            t_off[l] = pos
            pos += int(self.L[l] + self.L[l - 1] - 1)
            b_off[l] = pos
            pos += int(self.L[l - 1])
        self.t_off, self.b_off = t_off, b_off
        self.seed_length = pos
        self.output_length = T * D
        self.declared_error = eps
        self.label = f"inw(S={S},D={D},T={T},eps={eps:.3g},budget={self.budget})"

    def block_words(self, seeds):
        """(B, T, words(D)) packed blocks."""
        seeds = np.asarray(seeds, dtype=np.uint8)
        sw = pack_words(seeds)
        out = np.zeros((len(seeds), 1 << self.K, (self.D + 63) // 64), np.uint64)
        _tree(sw, self.L, self.t_off, self.b_off, self.K, out)
        return out[:, :self.T]

    def blocks_batch(self, seeds):
        """(B, T, D) block bits."""
        seeds = self._check(seeds)
        return unpack_words(self.block_words(seeds), self.D)

    def _check(self, seeds):
        seeds = np.asarray(seeds, dtype=np.uint8)
        if seeds.ndim != 2 or seeds.shape[1] != self.seed_length:
            raise ConfigurationError(f"expected seeds of shape (B, {self.seed_length}), got {seeds.shape}")
        return seeds

    def _batch(self, seeds):
        return bits_to_signs(self.blocks_batch(seeds).reshape(len(seeds), -1))

    def block(self, seed, j):
        """Block j alone, walking one root-to-leaf path."""
        if not 0 <= j < self.T:
            raise ConfigurationError(f"block {j} outside [0, {self.T})")
        seed = np.asarray(seed, dtype=np.uint8).reshape(-1)
        if len(seed) != self.seed_length:
            raise ConfigurationError(f"seed has {len(seed)} bits, expected {self.seed_length}")
        x = seed[:self.L[-1]].copy()
        for l in range(self.K, 0, -1):
            Lh, Ll = int(self.L[l]), int(self.L[l - 1])
            if j >> (l - 1) & 1:
                t = seed[self.t_off[l]:self.t_off[l] + Lh + Ll - 1]
                b = seed[self.b_off[l]:self.b_off[l] + Ll]
                x = toeplitz_apply(t, x, Ll) ^ b
            else:
                x = x[:Ll]
        return x

    def params(self):
        return {"S": self.S, "D": self.D, "T": self.T, "eps": self.eps, "budget": self.budget,
                "levels": self.L.tolist()}


def toeplitz_apply(t, x, out_len):
    """Reference mixing map on bit arrays: y_j = sum_i x_i t_{j + len(x) - 1 - i} mod 2."""
    t = np.asarray(t, dtype=np.int64)
    x = np.asarray(x, dtype=np.int64)
    Lh = len(x)
    if len(t) != Lh + out_len - 1:
        raise ConfigurationError("key length must be len(x) + out_len - 1")
    y = np.zeros(out_len, np.int64)
    for j in range(out_len):
        idx = j + Lh - 1 - np.arange(Lh)
        y[j] = int((x * t[idx]).sum() % 2)
    return y.astype(np.uint8)


def inw_prg(S, D, T, eps, budget=None):
    return INWGenerator(S, D, T, eps, budget)


def generator_acceptance(M, gen, exhaustive=True, samples=None, rng=None):
    """Acceptance probability of M on a block generator's outputs."""
    if exhaustive:
        seeds = all_seeds(gen.seed_length)
    else:
        from .core import random_seeds
        seeds = random_seeds(gen.seed_length, samples, rng)
    hits = 0
    for s in range(0, len(seeds), 1 << 16):
        blocks = blocks_to_ints(gen.blocks_batch(seeds[s:s + (1 << 16)]), M.D)
        hits += int(robp_eval_batch(M, blocks).sum())
    return hits / len(seeds)


def _lower_blocks(gen):
    """Block values of the (K-1)-level generator on every seed, cached on ``gen``."""
    if getattr(gen, "_lower", None) is None:
        sub = INWGenerator(gen.S, gen.D, gen.T // 2, gen.eps, gen.budget)
        if sub.seed_length > 24:
            raise CapacityError(f"{sub.seed_length}-bit lower seed is too large to enumerate")
        gen._lower = (blocks_to_ints(sub.blocks_batch(all_seeds(sub.seed_length)), gen.D), int(sub.L[-1]))
    return gen._lower


def exact_generator_acceptance(M, gen):
    """Acceptance probability of M over every seed of ``gen``, without enumerating all of them.

    The top-level offset makes the pair (x prefix, mixed value) uniform on
    pairs of L_{K-1}-bit strings, so only the seeds of the (K-1)-level
    generator are enumerated: the left half runs on one of its outputs and
    the right half on an independent one sharing the lower keys.
    """
    if gen.T != 1 << gen.K or gen.K < 1 or (M.T, M.D) != (gen.T, gen.D):
        raise ConfigurationError("exact acceptance needs T = 2^K >= 2 blocks matching the program")
    blocks, Lx = _lower_blocks(gen)
    hits = _pair_hits(M.layers, M.start, M.accepting, blocks, 1 << Lx)
    return hits / (len(blocks) << Lx)


@njit(cache=True)
def _pair_hits(layers, start, accepting, blocks, nx):
    half = blocks.shape[1]
    ns = layers.shape[1]
    left = np.empty(nx, np.int64)
    right = np.empty((nx, ns), np.int64)
    hits = 0
    for k in range(blocks.shape[0] // nx):
        base = k * nx
        for a in range(nx):
            st = start
            for t in range(half):
                st = layers[t, st, blocks[base + a, t]]
            left[a] = st
            for s0 in range(ns):
                st = s0
                for t in range(half):
                    st = layers[half + t, st, blocks[base + a, t]]
                right[a, s0] = st
        for y in range(nx):
            for a in range(nx):
                hits += accepting[right[y, left[a]]]
    return hits


# ------------------------------------------------------------ halfspaces

def round_weights(w, n=None):
    """Round every |w_i| up to a multiple of 1/n^2; returns integer numerators."""
    w = np.asarray(w, dtype=np.float64)
    n = n or len(w)
    scale = n * n
    num = np.ceil(np.abs(w) * scale - 1e-9).astype(np.int64)
    return np.sign(w).astype(np.int64) * num, scale


def state_bits_for_halfspace(n):
    """log2 of the state count of the compiled program for dimension n."""
    clamp = math.floor(math.sqrt(n) * n * n)
    return max(1, math.ceil(math.log2(2 * clamp + 2)))


class HalfspaceProgram(ROBP):
    """Program tracking the rounded running sum in units of 1/n^2.

    State s < 2*clamp+1 stands for the sum s - clamp; state 2*clamp+1 is
    the absorbing saturation state. Block l holds the signs of coordinates
    l*D .. l*D+D-1 (bit 0 means +1); coordinates beyond n carry weight 0.
    """

    def __init__(self, w, T, D, t):
        n = len(w)
        if T * D < n:
            raise ConfigurationError(f"{T} blocks of {D} bits cannot cover {n} coordinates")
        num, scale = round_weights(w, n)
        if math.sqrt(float((num.astype(np.float64) ** 2).sum())) / scale > 1 + 1 / n + 1e-12:
            raise ConfigurationError("rounded weights have l2 norm above 1 + 1/n")
        clamp = math.floor(math.sqrt(n) * n * n)
        states = 2 * clamp + 2
        S = max(1, math.ceil(math.log2(states)))
        if S > MAX_DENSE_STATE_BITS:
            raise CapacityError(f"{states} states exceed the dense table limit")
        sat = 2 * clamp + 1
        padded = np.zeros(T * D, np.int64)
        padded[:n] = num
        sums = np.arange(1 << S, dtype=np.int64) - clamp
        blockvals = np.arange(1 << D)
        bits = (blockvals[:, None] >> np.arange(D)) & 1
        signs = 1 - 2 * bits
        layers = np.empty((T, 1 << S, 1 << D), np.int64)
        for l in range(T):
            delta = signs @ padded[l * D:(l + 1) * D]
            nxt = sums[:, None] + delta[None, :]
            st = nxt + clamp
            st[np.abs(nxt) > clamp] = sat
            st[sat:, :] = np.arange(sat, 1 << S)[:, None]
            layers[l] = st
        thresh = math.ceil(t * scale - 1e-9)
        acc = np.zeros(1 << S, bool)
        acc[:sat] = np.abs(sums[:sat]) >= thresh
        acc[sat] = True
        super().__init__(S, D, layers, clamp, acc,
                         {"kind": "halfspace", "n": n, "t": t, "scale": scale, "clamp": clamp})
        self.n, self.clamp, self.scale, self.sat = n, clamp, scale, sat
        self.numerators = num

    def saturated_mass(self):
        return float(self.state_distributions()[:, self.sat].max())

    def rounded_weights(self):
        return self.numerators / self.scale


def halfspace_robp(w, T, D, t=0.0):
    return HalfspaceProgram(np.asarray(w, dtype=np.float64), T, D, t)
