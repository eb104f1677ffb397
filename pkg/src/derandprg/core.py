"""Seeds, sign vectors, the generator contract and sign-product combinators.

Bits map to signs by ``sign = 1 - 2*bit``, so bit 0 is +1.
"""
import hashlib
import json

import numpy as np

from .errors import ConfigurationError

MAX_ENUMERABLE_BITS = 24


def bits_to_signs(bits):
    return (1 - 2 * np.asarray(bits, dtype=np.int8)).astype(np.int8)


def signs_to_bits(signs):
    signs = np.asarray(signs)
    if not np.all((signs == 1) | (signs == -1)):
        raise ConfigurationError("sign entries must be exactly -1 or +1")
    return (signs < 0).astype(np.uint8)


def all_seeds(r):
    """Every r-bit seed; row s holds the little-endian bits of s."""
    if r > MAX_ENUMERABLE_BITS:
        raise ConfigurationError(f"refusing to enumerate 2^{r} seeds")
    s = np.arange(1 << r, dtype=np.uint32)
    return ((s[:, None] >> np.arange(r, dtype=np.uint32)) & 1).astype(np.uint8)


def random_seeds(r, count, rng):
    raw = rng.integers(0, 256, size=(count, (r + 7) // 8), dtype=np.uint8)
    return np.unpackbits(raw, axis=1, count=r, bitorder="little")


class Seed:
    """A fixed-length bit string."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
        if np.any(bits > 1):
            raise ConfigurationError("seed bits must be 0 or 1")
        self.bits = bits
        self.bits.setflags(write=False)

    @property
    def length(self):
        return len(self.bits)

    @classmethod
    def from_int(cls, value, length):
        if value < 0 or value >> length:
            raise ConfigurationError(f"{value} does not fit in {length} bits")
        return cls([(value >> j) & 1 for j in range(length)])

    @classmethod
    def from_hex(cls, text, length):
        """Hex integer whose bit j becomes seed bit j; it must fit in ``length`` bits."""
        return cls.from_int(int(text, 16) if text else 0, length)

    @classmethod
    def random(cls, length, rng):
        return cls(random_seeds(length, 1, rng)[0])

    def to_int(self):
        return sum(int(b) << j for j, b in enumerate(self.bits))

    def to_hex(self):
        return format(self.to_int(), "x")

    def __eq__(self, other):
        return isinstance(other, Seed) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.length, self.bits.tobytes()))

    def __repr__(self):
        return f"Seed({self.length} bits, 0x{self.to_hex()})"


class SignVector:
    """Immutable vector in {-1,+1}^n stored one bit per coordinate."""

    __slots__ = ("n", "packed")

    def __init__(self, packed, n):
        packed = np.asarray(packed, dtype=np.uint8)
        if len(packed) != (n + 7) // 8:
            raise ConfigurationError("packed length does not match n")
        if n % 8 and packed[-1] >> (n % 8):
            raise ConfigurationError("padding bits must be zero")
        self.n = n
        self.packed = packed.copy()
        self.packed.setflags(write=False)

    @classmethod
    def from_bits(cls, bits):
        bits = np.asarray(bits, dtype=np.uint8)
        return cls(np.packbits(bits, bitorder="little"), len(bits))

    @classmethod
    def from_signs(cls, signs):
        return cls.from_bits(signs_to_bits(signs))

    def bits(self):
        return np.unpackbits(self.packed, count=self.n, bitorder="little")

    def signs(self):
        return bits_to_signs(self.bits())

    def __len__(self):
        return self.n

    def __eq__(self, other):
        return isinstance(other, SignVector) and self.n == other.n and self.packed.tobytes() == other.packed.tobytes()

    def __hash__(self):
        return hash((self.n, self.packed.tobytes()))

    def __mul__(self, other):
        if self.n != other.n:
            raise ConfigurationError("length mismatch")
        return SignVector(self.packed ^ other.packed, self.n)

    def __neg__(self):
        flipped = np.packbits(np.ones(self.n, np.uint8), bitorder="little")
        return SignVector(self.packed ^ flipped, self.n)

    def __repr__(self):
        s = "".join("+" if b == 0 else "-" for b in self.bits()[:64])
        return f"SignVector(n={self.n}, {s}{'...' if self.n > 64 else ''})"


def _check_seeds(seeds, r):
    seeds = np.asarray(seeds, dtype=np.uint8)
    if seeds.ndim != 2 or seeds.shape[1] != r:
        raise ConfigurationError(f"expected seeds of shape (B, {r}), got {seeds.shape}")
    return seeds


class Generator:
    """Deterministic map from r-bit seeds to sign vectors of length n.

    Subclasses set ``seed_length``, ``output_length`` and ``label`` and
    implement ``_batch`` which maps a (B, r) uint8 bit array to a (B, n)
    int8 array of signs.
    """

    seed_length = 0
    output_length = 0
    label = ""

    def expand(self, seed):
        if isinstance(seed, Seed):
            seed = seed.bits
        seed = np.asarray(seed, dtype=np.uint8).reshape(-1)
        if len(seed) != self.seed_length:
            raise ConfigurationError(f"{self.label}: seed has {len(seed)} bits, expected {self.seed_length}")
        return SignVector.from_signs(self.expand_batch(seed[None, :])[0])

    def expand_batch(self, seeds):
        seeds = _check_seeds(seeds, self.seed_length)
        return self._batch(seeds)

    def _batch(self, seeds):
        raise NotImplementedError

    def sample(self, count, rng):
        return self.expand_batch(random_seeds(self.seed_length, count, rng))

    def enumerate(self):
        """Outputs on every seed, in seed-integer order."""
        return self.expand_batch(all_seeds(self.seed_length))

    def params(self):
        return {}

    def children(self):
        return []

    def descriptor(self):
        d = {"type": type(self).__name__, "label": self.label, "n": self.output_length,
             "seed_length": self.seed_length}
        d.update(self.params())
        kids = self.children()
        if kids:
            d["children"] = [k.descriptor() for k in kids]
        return d

    def descriptor_hash(self):
        blob = json.dumps(self.descriptor(), sort_keys=True, default=_jsonable).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def __repr__(self):
        return f"<{type(self).__name__} {self.label} r={self.seed_length} n={self.output_length}>"


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


class ConstantGenerator(Generator):
    """Ignores its seed and always returns the same vector."""

    def __init__(self, signs, seed_length=0):
        self.value = np.asarray(signs, dtype=np.int8)
        signs_to_bits(self.value)
        self.output_length = len(self.value)
        self.seed_length = seed_length
        self.label = "constant"

    def _batch(self, seeds):
        return np.broadcast_to(self.value, (len(seeds), self.output_length)).copy()

    def params(self):
        return {"value": self.value.tolist()}


class TableGenerator(Generator):
    """Explicit lookup table: row s is the output on the seed with integer value s."""

    def __init__(self, table, label="table"):
        table = np.asarray(table, dtype=np.int8)
        r = int(len(table)).bit_length() - 1
        if len(table) != 1 << r:
            raise ConfigurationError("table must have a power-of-two number of rows")
        signs_to_bits(table)
        self.table = table
        self.seed_length = r
        self.output_length = table.shape[1]
        self.label = label

    def _batch(self, seeds):
        idx = (seeds.astype(np.int64) << np.arange(self.seed_length)).sum(axis=1)
        return self.table[idx]

    def params(self):
        return {"table": self.table.tolist()}


class XorCombined(Generator):
    """Coordinate-wise sign product; seed is g1's seed followed by g2's."""

    def __init__(self, g1, g2):
        if g1.output_length != g2.output_length:
            raise ConfigurationError(
                f"cannot combine outputs of length {g1.output_length} and {g2.output_length}")
        self.g1, self.g2 = g1, g2
        self.seed_length = g1.seed_length + g2.seed_length
        self.output_length = g1.output_length
        self.label = f"({g1.label} * {g2.label})"

    def _batch(self, seeds):
        r1 = self.g1.seed_length
        return self.g1.expand_batch(seeds[:, :r1]) * self.g2.expand_batch(seeds[:, r1:])

    def children(self):
        return [self.g1, self.g2]


class Symmetrized(Generator):
    """Appends one seed bit that negates the whole output when set."""

    def __init__(self, g):
        self.g = g
        self.seed_length = g.seed_length + 1
        self.output_length = g.output_length
        self.label = f"sym({g.label})"

    def _batch(self, seeds):
        out = self.g.expand_batch(seeds[:, :-1])
        return out * bits_to_signs(seeds[:, -1])[:, None]

    def children(self):
        return [self.g]


def xor_combine(g1, g2):
    return XorCombined(g1, g2)


def symmetrize(g):
    return Symmetrized(g)


def bias_wrap(g, eps):
    """Product with an independent eps-biased string, which makes the output eps-biased."""
    from .hashing import eps_biased_bits

    return XorCombined(g, eps_biased_bits(g.output_length, eps))
