"""Arithmetic in GF(2^f) for 1 <= f <= 63.

Elements are integers below 2^f whose bit j is the coefficient of x^j.
The modulus for each degree is fixed once and for all: the numerically
smallest primitive polynomial when f <= 32, otherwise the numerically
smallest irreducible one. Fields of at most TABLE_BITS bits also get
log/exp tables for constant-time powers.
"""
from functools import lru_cache

import numpy as np
from llvmlite import binding as _llvm
from llvmlite import ir as _ir
from numba import njit, types
from numba.core import cgutils
from numba.extending import intrinsic

from .errors import CapacityError

MAX_FIELD_BITS = 63
TABLE_BITS = 25


def clmul(a, b):
    """Carry-less product of two Python ints."""
    r = 0
    while b:
        if b & 1:
            r ^= a
        a <<= 1
        b >>= 1
    return r


def polymod(a, p):
    dp = p.bit_length() - 1
    while a.bit_length() - 1 >= dp:
        a ^= p << (a.bit_length() - 1 - dp)
    return a


def _polygcd(a, b):
    while b:
        a, b = b, polymod(a, b)
    return a


def _prime_factors(n):
    out = []
    d = 2
    while d * d <= n:
        if n % d == 0:
            out.append(d)
            while n % d == 0:
                n //= d
        d += 1
    if n > 1:
        out.append(n)
    return out


def _xpow2k(k, p):
    # x^(2^k) mod p by repeated squaring
    r = 2
    for _ in range(k):
        r = polymod(clmul(r, r), p)
    return r


def is_irreducible(p):
    """Rabin's test over GF(2)."""
    f = p.bit_length() - 1
    if f < 1 or not p & 1 and f > 1:
        return f == 1
    if _xpow2k(f, p) != polymod(2, p):
        return False
    for q in _prime_factors(f):
        g = _polygcd(p, _xpow2k(f // q, p) ^ 2)
        if g != 1:
            return False
    return True


def _powmod(a, e, p):
    r = 1
    while e:
        if e & 1:
            r = polymod(clmul(r, a), p)
        a = polymod(clmul(a, a), p)
        e >>= 1
    return r


def is_primitive(p):
    f = p.bit_length() - 1
    if not is_irreducible(p):
        return False
    order = (1 << f) - 1
    if order == 1:
        return True
    x = polymod(2, p)
    return all(_powmod(x, order // q, p) != 1 for q in _prime_factors(order))


@lru_cache(maxsize=None)
def field_poly(f):
    """Modulus of GF(2^f), including the x^f term."""
    if not 1 <= f <= MAX_FIELD_BITS:
        raise CapacityError(f"field of {f} bits outside supported range 1..{MAX_FIELD_BITS}")
    test = is_primitive if f <= 32 else is_irreducible
    c = (1 << f) | 1
    while not test(c):
        c += 2
    return c


def bits_for(size):
    """Smallest f >= 1 with 2^f >= size."""
    return max(1, int(size - 1).bit_length())


def mul(a, b, f):
    return polymod(clmul(a, b), field_poly(f))


def power(a, e, f):
    return _powmod(a, e, field_poly(f))


# ---------------------------------------------------------------- kernels

@njit(cache=True, inline="always")
def parity64(x):
    x ^= x >> np.uint64(32)
    x ^= x >> np.uint64(16)
    x ^= x >> np.uint64(8)
    x ^= x >> np.uint64(4)
    x ^= x >> np.uint64(2)
    x ^= x >> np.uint64(1)
    return x & np.uint64(1)


@njit(cache=True)
def nb_mul(a, b, poly, f):
    """Bit-serial product; poly includes the top bit."""
    r = np.uint64(0)
    top = np.uint64(1) << np.uint64(f)
    one = np.uint64(1)
    for _ in range(f):
        if b & one:
            r ^= a
        b >>= one
        a <<= one
        if a & top:
            a ^= poly
    return r


@njit(cache=True)
def nb_pow(a, e, poly, f):
    r = np.uint64(1)
    while e > 0:
        if e & 1:
            r = nb_mul(r, a, poly, f)
        a = nb_mul(a, a, poly, f)
        e >>= 1
    return r


@njit(cache=True)
def fill_mul_table(a, poly, f, tab):
    """tab[q, w] = a * (w << 8q); tab has shape (ceil(f/8), 256)."""
    nq = tab.shape[0]
    top = np.uint64(1) << np.uint64(f)
    one = np.uint64(1)
    pw = np.empty(nq * 8, np.uint64)
    cur = a
    for j in range(nq * 8):
        if j < f:
            pw[j] = cur
            cur <<= one
            if cur & top:
                cur ^= poly
        else:
            pw[j] = 0
    for q in range(nq):
        tab[q, 0] = 0
        for w in range(1, 256):
            low = w & (-w)
            j = 0
            while (low >> j) != 1:
                j += 1
            tab[q, w] = tab[q, w ^ low] ^ pw[8 * q + j]


@njit(cache=True, inline="always")
def mul_by_table(tab, b):
    r = np.uint64(0)
    for q in range(tab.shape[0]):
        r ^= tab[q, (b >> np.uint64(8 * q)) & np.uint64(255)]
    return r


@njit(cache=True)
def _build_tables(poly, f, exp, log):
    order = (1 << f) - 1
    top = np.uint64(1) << np.uint64(f)
    cur = np.uint64(1)
    for k in range(order):
        exp[k] = cur
        log[cur] = k
        cur <<= np.uint64(1)
        if cur & top:
            cur ^= poly
    log[0] = 0


@lru_cache(maxsize=None)
def log_tables(f):
    """(exp, log) arrays for GF(2^f); x is a generator of the unit group."""
    if f > TABLE_BITS:
        raise CapacityError(f"no log tables above {TABLE_BITS} bits")
    order = (1 << f) - 1
    exp = np.empty(max(order, 1), np.uint32)
    log = np.zeros(1 << f, np.uint32)
    _build_tables(np.uint64(field_poly(f)), f, exp, log)
    exp.setflags(write=False)
    log.setflags(write=False)
    return exp, log


def pack_uint(bits, start, width):
    """Little-endian integers from bits[..., start:start+width]."""
    chunk = np.asarray(bits[..., start:start + width], dtype=np.uint64)
    weights = np.left_shift(np.uint64(1), np.arange(width, dtype=np.uint64))
    return (chunk * weights).sum(axis=-1, dtype=np.uint64) if width else np.zeros(chunk.shape[:-1], np.uint64)


def unpack_uint(values, width):
    values = np.asarray(values, dtype=np.uint64)
    shifts = np.arange(width, dtype=np.uint64)
    return ((values[..., None] >> shifts) & np.uint64(1)).astype(np.uint8)


# ------------------------------------------------------ split power tables

SPLIT_MAX_BITS = 32


@njit(cache=True)
def _fill_reduction(poly, f, red):
    """red[q, b] = (b * x^(8q)) * x^f mod poly."""
    for q in range(red.shape[0]):
        for b in range(256):
            v = np.uint64(b) << np.uint64(8 * q)
            # multiply by x^f one shift at a time
            for _ in range(f):
                v <<= np.uint64(1)
                if v & (np.uint64(1) << np.uint64(f)):
                    v ^= poly
            red[q, b] = v


@lru_cache(maxsize=None)
def split_tables(f):
    """(lo, hi, red, s): x^e = lo[e mod 2^s] * hi[e >> s] for 0 <= e < 2^f - 1.

    ``red`` folds the high half of a carry-less product back into the
    field. Tables stay small enough to sit in cache for f <= 32.
    """
    if not 1 <= f <= SPLIT_MAX_BITS:
        raise CapacityError(f"split tables cover 1..{SPLIT_MAX_BITS} bits")
    p = field_poly(f)
    s = (f + 1) // 2
    lo = np.empty(1 << s, np.uint64)
    hi = np.empty((1 << (f - s)) + 1, np.uint64)
    cur = 1
    for j in range(len(lo)):
        lo[j] = cur
        cur = polymod(cur << 1, p)
    step = cur
    cur = 1
    for j in range(len(hi)):
        hi[j] = cur
        cur = polymod(clmul(cur, step), p)
    red = np.zeros((max(1, (f + 6) // 8), 256), np.uint64)
    _fill_reduction(np.uint64(p), f, red)
    for t in (lo, hi, red):
        t.setflags(write=False)
    return lo, hi, red, s


@njit(cache=True, inline="always")
def mul_reduced(u, v, f, red, scratch):
    """u * v in GF(2^f) for f <= 32 using a nibble window and byte reduction."""
    return mul_reduced_at(u, v, f, red, 0, red.shape[0], scratch)


@njit(cache=True, inline="always")
def mul_reduced_at(u, v, f, red, ro, nr, scratch):
    """mul_reduced with the reduction rows red[ro:ro+nr] of a pooled table."""
    scratch[0] = 0
    scratch[1] = u
    for j in range(2, 16, 2):
        scratch[j] = scratch[j >> 1] << np.uint64(1)
        scratch[j + 1] = scratch[j] ^ u
    r = np.uint64(0)
    q = 0
    while q < f:
        r ^= scratch[(v >> np.uint64(q)) & np.uint64(15)] << np.uint64(q)
        q += 4
    high = r >> np.uint64(f)
    r &= (np.uint64(1) << np.uint64(f)) - np.uint64(1)
    for k in range(nr):
        r ^= red[ro + k, (high >> np.uint64(8 * k)) & np.uint64(255)]
    return r


# hardware carry-less multiply, used for the field multiply when the host has it
HAVE_CLMUL = bool(_llvm.get_host_cpu_features().get("pclmul", False))


@intrinsic
def _hw_clmul(typingctx, a, b):
    """Low 64 bits of the carry-less product of two uint64 values."""
    sig = types.uint64(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i64 = _ir.IntType(64)
        v2 = _ir.VectorType(i64, 2)
        fnty = _ir.FunctionType(v2, [v2, v2, _ir.IntType(8)])
        fn = cgutils.get_or_insert_function(builder.module, fnty, "llvm.x86.pclmulqdq")
        zero = _ir.Constant(v2, [0, 0])
        i0 = _ir.Constant(_ir.IntType(32), 0)
        va = builder.insert_element(zero, args[0], i0)
        vb = builder.insert_element(zero, args[1], i0)
        return builder.extract_element(builder.call(fn, [va, vb, _ir.Constant(_ir.IntType(8), 0)]), i0)

    return sig, codegen


@intrinsic
def clmul128(typingctx, a, b):
    """Full 128-bit carry-less product of two uint64 values as (low, high)."""
    sig = types.UniTuple(types.uint64, 2)(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i64 = _ir.IntType(64)
        v2 = _ir.VectorType(i64, 2)
        fnty = _ir.FunctionType(v2, [v2, v2, _ir.IntType(8)])
        fn = cgutils.get_or_insert_function(builder.module, fnty, "llvm.x86.pclmulqdq")
        zero = _ir.Constant(v2, [0, 0])
        i0 = _ir.Constant(_ir.IntType(32), 0)
        i1 = _ir.Constant(_ir.IntType(32), 1)
        va = builder.insert_element(zero, args[0], i0)
        vb = builder.insert_element(zero, args[1], i0)
        r = builder.call(fn, [va, vb, _ir.Constant(_ir.IntType(8), 0)])
        return context.make_tuple(builder, signature.return_type,
                                  [builder.extract_element(r, i0), builder.extract_element(r, i1)])

    return sig, codegen


def barrett_mu(f):
    """floor(x^(2f) / poly) for the field modulus, the Barrett constant."""
    poly = field_poly(f)
    q, r = 0, 1 << (2 * f)
    while r.bit_length() > f:
        sh = r.bit_length() - 1 - f
        q |= 1 << sh
        r ^= poly << sh
    return q


@njit(cache=True, inline="always")
def mul_barrett(u, v, f, poly, mu):
    """u * v in GF(2^f) for f <= 32 via carry-less multiply and Barrett reduction."""
    sf = np.uint64(f)
    c = _hw_clmul(u, v)
    q = _hw_clmul(c >> sf, mu) >> sf
    return (c ^ _hw_clmul(q, poly)) & ((np.uint64(1) << sf) - np.uint64(1))
