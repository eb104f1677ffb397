"""Declarative experiment runner, generator output streams and base calibration.

Subcommands:
  run             execute the experiment named in a JSON config, write JSON and CSV reports
  gen             emit generator outputs as text rows or the packed binary format
  calibrate-base  choose and certify the base generator for (n, eps)
  describe        print a generator descriptor and its hash

Text emission writes one vector per line as space separated +1/-1 entries.
Packed emission is an 8-byte magic, a little-endian u32 n, then ceil(n/8)
bytes per vector with coordinate i in bit i%8 of byte i//8; a clear bit is +1.
"""
import argparse
import csv
import hashlib
import io
import json
import math
import os
import re
import struct
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .analysis import (LEVEL, WeightVector, clopper_pearson, cosine_corpus, exact_sum_distribution,
                       fit_cosine_constant, moment_probe, norm_bounds, norm_trajectory, sample_dots,
                       tail_from_dots, tv_sampling_slack, DistributionTable, tv_distance)
from .chernoff import (BucketedGenerator, ChernoffConfig, FinalGenerator, InnerGenerator, RecursiveGenerator,
                       chernoff_params)
from .core import SignVector, Seed, Symmetrized, XorCombined, bias_wrap, random_seeds
from .errors import CalibrationError, CapacityError, ConfigurationError
from .hashing import (KwiseFamily, SmallBiasFamily, combined_bits, eps_biased_bits, kwise_bits,
                      spreading_family, verify_spreading)
from .inw import (INWGenerator, _lower_blocks, exact_generator_acceptance, exhaustive_acceptance,
                  generator_acceptance, robp_corpus)
from .majority import (SmallAlphaSchedule, base_generator, calibrate_base, large_alpha_prg,
                       signed_majority_prg, small_alpha_prg)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("experiment", "point", "statistic", "estimate", "ci_low", "ci_high", "reference", "holds",
               "samples", "rng_seed", "descriptor_hash")
CSV_HEADER = f"# derandprg report schema v{SCHEMA_VERSION}: " + ",".join(CSV_COLUMNS)
PACKED_MAGIC = b"DRPGSV01"
EXPERIMENTS = ("tail", "tv", "fourier", "spreading", "moments", "cosine-approx", "norm-trajectory",
               "inw-fooling", "calibrate-base")
MAX_EXHAUSTIVE_SEED = 20
Z99 = 2.5758293035489004


class ConfigError(ConfigurationError):
    """Validation failure carrying the config line it refers to (0 when unknown)."""

    def __init__(self, message, line=0, source="<config>"):
        self.line = line
        self.source = source
        super().__init__(f"{source}:{line}: {message}" if line else f"{source}: {message}")


# ------------------------------------------------------------ generator specs

_GEN_KEYS = {
    "smallbias": ({"n", "eps"}, set()),
    "kwise": ({"n", "k"}, set()),
    "combined": ({"n", "delta", "k"}, set()),
    "recursive": ({"n", "delta"}, {"gamma", "constants"}),
    "inner": ({"n", "delta"}, {"constants"}),
    "bucketed": ({"n", "delta"}, {"constants"}),
    "final": ({"n", "delta"}, {"constants", "inw_budget"}),
    "inw": ({"S", "D", "T", "eps"}, {"budget"}),
    "base": ({"n", "eps"}, {"probes", "samples", "rng_seed"}),
    "large": ({"n", "eps"}, {"inw_budget", "max_buckets", "c_spread", "C_spread"}),
    "small": ({"n", "delta"}, {"C"}),
    "signed-majority": ({"n", "eps"}, {"C"}),
    "symmetrize": ({"of"}, set()),
    "xor": ({"of"}, set()),
    "bias-wrap": ({"of", "eps"}, set()),
}
GENERATOR_TYPES = tuple(_GEN_KEYS)


def _check_keys(spec, required, optional, where):
    if not isinstance(spec, dict):
        raise ConfigurationError(f"{where} must be an object")
    missing = required - set(spec)
    if missing:
        raise ConfigurationError(f"{where} is missing {sorted(missing)}")
    extra = set(spec) - required - optional - {"type"}
    if extra:
        raise ConfigurationError(f"{where} has unknown keys {sorted(extra)}")


def _chernoff_config(spec):
    consts = spec.get("constants") or {}
    known = {f.name for f in fields(ChernoffConfig)}
    bad = set(consts) - known
    if bad:
        raise ConfigurationError(f"unknown constants {sorted(bad)}")
    return ChernoffConfig(**consts)


def build_generator(spec, where="generator"):
    """Instantiate a generator from its JSON spec ``{"type": ..., parameters}``."""
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigurationError(f"{where} needs a 'type' field")
    t = spec["type"]
    if t not in _GEN_KEYS:
        raise ConfigurationError(f"{where}: unknown generator type {t!r}; expected one of {list(GENERATOR_TYPES)}")
    _check_keys(spec, *_GEN_KEYS[t], where)
    if t == "smallbias":
        return eps_biased_bits(int(spec["n"]), float(spec["eps"]))
    if t == "kwise":
        return kwise_bits(int(spec["n"]), int(spec["k"]))
    if t == "combined":
        return combined_bits(int(spec["n"]), float(spec["delta"]), int(spec["k"]))
    if t in ("recursive", "inner", "bucketed", "final"):
        params = chernoff_params(int(spec["n"]), float(spec["delta"]), _chernoff_config(spec),
                                 spec.get("gamma"))
        if t == "recursive":
            return RecursiveGenerator(params)
        if t == "inner":
            return InnerGenerator(params)
        if t == "bucketed":
            return BucketedGenerator(params)
        return FinalGenerator(params, spec.get("inw_budget"))
    if t == "inw":
        return INWGenerator(int(spec["S"]), int(spec["D"]), int(spec["T"]), float(spec["eps"]), spec.get("budget"))
    if t == "base":
        kw = {k: spec[k] for k in ("probes", "samples", "rng_seed") if k in spec}
        return base_generator(int(spec["n"]), float(spec["eps"]), **kw)
    if t == "large":
        kw = {k: spec[k] for k in ("inw_budget", "max_buckets", "c_spread", "C_spread") if k in spec}
        return large_alpha_prg(int(spec["n"]), float(spec["eps"]), **kw)
    if t == "small":
        return small_alpha_prg(int(spec["n"]), float(spec["delta"]), spec.get("C", 4))
    if t == "signed-majority":
        return signed_majority_prg(int(spec["n"]), float(spec["eps"]), spec.get("C", 4))
    if t == "symmetrize":
        return Symmetrized(build_generator(spec["of"], where + ".of"))
    if t == "bias-wrap":
        return bias_wrap(build_generator(spec["of"], where + ".of"), float(spec["eps"]))
    parts = spec["of"]
    if not isinstance(parts, list) or len(parts) != 2:
        raise ConfigurationError(f"{where}.of must list exactly two generators")
    return XorCombined(build_generator(parts[0], where + ".of[0]"), build_generator(parts[1], where + ".of[1]"))


def spec_target(spec):
    """The error a generator spec declares: eps, else delta."""
    if not spec:
        return None
    for key in ("eps", "delta"):
        if key in spec:
            return float(spec[key])
    return None


# ------------------------------------------------------------ configs

_VECTOR_KINDS = ("explicit", "random-unit", "random-signed")


@dataclass
class ExperimentConfig:
    """Everything one experiment run depends on.

    ``vectors`` is one of
      {"kind": "explicit", "entries": [[...], ...]}
      {"kind": "random-unit", "n": n, "count": c, "rng_seed": s}
      {"kind": "random-signed", "n": n, "count": c, "densities": [...], "rng_seed": s}
    ``grid`` holds the experiment's parameter lists and scalars.
    """

    kind: str
    generator: dict = None
    vectors: dict = None
    grid: dict = field(default_factory=dict)
    samples: int = 10000
    rng_seed: int = 0
    out: str = "."
    format: str = "both"
    schema: int = SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)

    def emit(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d, text=None, source="<config>"):
        def fail(msg, key=None):
            raise ConfigError(msg, _key_line(text, key) if text and key else 0, source)

        if not isinstance(d, dict):
            fail("top level must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                fail(f"unknown field {key!r}", key)
        if d.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
            fail(f"unsupported schema {d.get('schema')!r}; this build reads schema {SCHEMA_VERSION}", "schema")
        if "kind" not in d:
            fail("missing field 'kind'")
        if d["kind"] not in EXPERIMENTS:
            fail(f"unknown experiment kind {d['kind']!r}; expected one of {list(EXPERIMENTS)}", "kind")
        for key, typ in (("samples", int), ("rng_seed", int)):
            if key in d and (not isinstance(d[key], typ) or isinstance(d[key], bool) or d[key] < 0):
                fail(f"{key} must be a nonnegative integer", key)
        if d.get("format", "both") not in ("json", "csv", "both"):
            fail("format must be json, csv or both", "format")
        if "grid" in d and not isinstance(d["grid"], dict):
            fail("grid must be an object", "grid")
        if d.get("generator") is not None:
            g = d["generator"]
            if not isinstance(g, dict) or g.get("type") not in _GEN_KEYS:
                fail(f"generator type must be one of {list(GENERATOR_TYPES)}", "generator")
            try:
                _check_keys(g, *_GEN_KEYS[g["type"]], "generator")
            except ConfigurationError as e:
                fail(str(e), "generator")
        v = d.get("vectors")
        if v is not None:
            if not isinstance(v, dict) or v.get("kind") not in _VECTOR_KINDS:
                fail(f"vectors.kind must be one of {list(_VECTOR_KINDS)}", "vectors")
            if v["kind"] == "explicit" and not isinstance(v.get("entries"), list):
                fail("explicit vectors need an 'entries' list", "vectors")
            if v["kind"] != "explicit" and ("n" not in v or "count" not in v):
                fail("random vectors need 'n' and 'count'", "vectors")
        if d["kind"] in ("tail", "tv", "fourier") and (d.get("generator") is None or v is None):
            fail(f"experiment {d['kind']!r} needs both 'generator' and 'vectors'", "kind")
        return cls(**d)

    @classmethod
    def parse(cls, text, source="<config>"):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(e.msg, e.lineno, source) from None
        return cls.from_dict(d, text, source)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.parse(fh.read(), path)


def _key_line(text, key):
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 0


def build_vectors(spec):
    """WeightVectors from a vector spec."""
    kind = spec["kind"]
    if kind == "explicit":
        return [WeightVector(e) for e in spec["entries"]]
    rng = np.random.default_rng(spec.get("rng_seed", 0))
    n, count = int(spec["n"]), int(spec["count"])
    if kind == "random-unit":
        return [WeightVector.random_unit(n, rng) for _ in range(count)]
    dens = spec.get("densities") or [n]
    for d in dens:
        if not 1 <= d <= n:
            raise ConfigurationError(f"density {d} outside [1, {n}]")
    return [WeightVector.random_signed(n, int(dens[j % len(dens)]), rng) for j in range(count)]


# ------------------------------------------------------------ reports

def _hash_obj(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _row(point, statistic, estimate, lo, hi, reference, holds, samples, rng_seed, dhash):
    return {"point": point, "statistic": statistic, "estimate": estimate, "ci_low": lo, "ci_high": hi,
            "reference": reference, "holds": holds, "samples": samples, "rng_seed": rng_seed,
            "descriptor_hash": dhash}


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def report_csv(report):
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report["rows"]:
        w.writerow([_fmt(report["experiment"] if c == "experiment" else r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True, default=_plain) + "\n"


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def atomic_write(path, data):
    """Write via a temp file in the target directory and rename over ``path``."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ------------------------------------------------------------ experiments

def _gen_and_hash(cfg):
    gen = build_generator(cfg.generator)
    return gen, gen.descriptor_hash()


def _exhaustive(cfg, gen):
    return bool(cfg.grid.get("exhaustive", False)) and gen.seed_length <= MAX_EXHAUSTIVE_SEED


def _exp_tail(cfg):
    gen, dh = _gen_and_hash(cfg)
    vecs = build_vectors(cfg.vectors)
    ts = cfg.grid.get("t", [2, 3, 4])
    ref_kind = cfg.grid.get("reference", "chernoff")
    delta = spec_target(cfg.generator) or 0.0
    exh = _exhaustive(cfg, gen)
    W = np.array([v.entries for v in vecs])
    dots = sample_dots(gen, W, cfg.samples, cfg.rng_seed, exhaustive=exh)
    rows = []
    for j in range(len(vecs)):
        for t in ts:
            est = tail_from_dots(dots[:, j], t, exh)
            if ref_kind == "chernoff":
                ref = 4 * math.exp(-t * t / 16) + delta
            elif isinstance(ref_kind, (int, float)):
                ref = float(ref_kind)
            else:
                ref = None
            holds = None if ref is None else est.ci_low <= ref
            rows.append(_row(f"v={j};t={t}", "tail", est.estimate, est.ci_low, est.ci_high, ref, holds,
                             est.samples, cfg.rng_seed, dh))
    return rows, {"descriptor": gen.descriptor(), "exhaustive": exh}


def _exp_tv(cfg):
    gen, dh = _gen_and_hash(cfg)
    vecs = build_vectors(cfg.vectors)
    target = float(cfg.grid.get("target", spec_target(cfg.generator) or 0.0))
    moduli = cfg.grid.get("moduli", [])
    exh = _exhaustive(cfg, gen)
    W = np.array([v.entries for v in vecs])
    dots = sample_dots(gen, W, cfg.samples, cfg.rng_seed, exhaustive=exh)
    N = len(dots)
    rows = []
    for j, v in enumerate(vecs):
        oracle = exact_sum_distribution(v)
        emp = DistributionTable.from_samples(np.rint(dots[:, j]) if v.signed else dots[:, j])
        d = tv_distance(emp, oracle)
        slack = 0.0 if exh else tv_sampling_slack(len(oracle), N)
        rows.append(_row(f"v={j};K={v.l0}", "dtv", d, max(0.0, d - slack), d + slack, target,
                         d - slack <= target, N, cfg.rng_seed, dh))
        for q in moduli:
            for r in range(q):
                hits = int(round(emp.residue_mass(q, r) * N))
                lo, hi = (hits / N, hits / N) if exh else clopper_pearson(hits, N)
                want = oracle.residue_mass(q, r)
                gap = abs(hits / N - want)
                glo = max(0.0, lo - want, want - hi)
                ghi = max(abs(lo - want), abs(hi - want))
                rows.append(_row(f"v={j};mod={q};r={r}", "residue_gap", gap, glo, ghi, target, glo <= target,
                                 N, cfg.rng_seed, dh))
    return rows, {"descriptor": gen.descriptor(), "exhaustive": exh,
                  "slack": "empirical-TV deviation bound at 99%; residues use exact binomial intervals"}


def _exp_fourier(cfg):
    gen, dh = _gen_and_hash(cfg)
    vecs = build_vectors(cfg.vectors)
    alphas = cfg.grid.get("alpha", [0.125, 0.25])
    target = float(cfg.grid.get("target", spec_target(cfg.generator) or 0.0))
    exh = _exhaustive(cfg, gen)
    W = np.array([v.entries for v in vecs])
    dots = sample_dots(gen, W, cfg.samples, cfg.rng_seed, exhaustive=exh)
    N = len(dots)
    rows = []
    for j, v in enumerate(vecs):
        for a in alphas:
            a = float(a)
            ang = 2 * math.pi * a * dots[:, j]
            c, s = np.cos(ang), np.sin(ang)
            uni = math.cos(2 * math.pi * a) ** v.l0
            est = math.hypot(float(c.mean()) - uni, float(s.mean()))
            se = 0.0 if exh or N < 2 else Z99 * math.sqrt((c.var(ddof=1) + s.var(ddof=1)) / N)
            rows.append(_row(f"v={j};alpha={a!r}", "fourier_gap", est, max(0.0, est - se), est + se, target,
                             est - se <= target, N, cfg.rng_seed, dh))
    return rows, {"descriptor": gen.descriptor(), "exhaustive": exh,
                  "interval": "normal approximation, 99% per component"}


def _exp_spreading(cfg):
    g = cfg.grid
    fam = spreading_family(int(g["n"]), float(g["eps"]), g.get("c_spread", 1.0), g.get("C_spread", 3.0),
                           g.get("max_buckets"))
    size = int(g.get("index_size", min(fam.ell ** 2, fam.n)))
    if not 1 <= size <= fam.n:
        raise ConfigurationError(f"index_size {size} outside [1, {fam.n}]")
    desc = fam.descriptor()
    dh = _hash_obj(desc)
    rng = np.random.default_rng(cfg.rng_seed)
    hs = fam.evaluate_batch(random_seeds(fam.seed_length, cfg.samples, rng))
    fails = 0
    for h in hs:
        I = rng.choice(fam.n, size=size, replace=False)
        fails += not verify_spreading(h, I, fam.ell)
    lo, hi = clopper_pearson(fails, cfg.samples)
    target = float(g.get("target", g["eps"]))
    rows = [_row(f"n={fam.n};|I|={size};ell={fam.ell}", "spread_failure", fails / cfg.samples, lo, hi, target,
                 lo <= target, cfg.samples, cfg.rng_seed, dh)]
    return rows, {"descriptor": desc}


def _family_from(spec):
    kind = spec.get("kind", "kwise")
    n, m = int(spec["n"]), int(spec["m"])
    if kind == "kwise":
        return KwiseFamily(n, m, int(spec["k"]))
    if kind == "smallbias":
        return SmallBiasFamily(n, m, float(spec["delta"]))
    raise ConfigurationError(f"unknown family kind {kind!r}")


def _exp_moments(cfg):
    g = cfg.grid
    kind = g.get("kind", "hv")
    fam = _family_from(g["family"])
    v = build_vectors(cfg.vectors)[0]
    if len(v) != fam.n:
        raise ConfigurationError("vector length does not match the family")
    ps = g.get("p", [2, 4])
    trials = None if g.get("exhaustive") else cfg.samples
    if kind in ("hv", "bucket"):
        inst = {"v": v, "family": fam, "bucket": g.get("bucket", 0)}
    elif kind == "norm":
        inst = {"v": v, "family": fam, "signs": eps_biased_bits(fam.n, float(g.get("sign_bias", 2.0 ** -10)))}
    elif kind in ("l2", "q2", "q4"):
        rng = np.random.default_rng(cfg.rng_seed)
        h = fam.evaluate_batch(random_seeds(fam.seed_length, 1, rng))[0]
        inst = {"v": v, "h": h, "m": fam.m, "alpha": float(g.get("alpha", 0.01))}
    else:
        raise ConfigurationError(f"unknown moment kind {kind!r}")
    chk = moment_probe(kind, inst, ps, trials, cfg.rng_seed)
    dh = _hash_obj(fam.descriptor())
    rows = []
    for p in sorted(chk.moments):
        ref = chk.reference[p]
        rows.append(_row(f"kind={kind};p={p}", "moment", chk.moments[p], None, None, ref,
                         chk.moments[p] <= ref, chk.trials, cfg.rng_seed, dh))
    return rows, {"descriptor": fam.descriptor(), "fitted_constant": {str(k): x for k, x in chk.fitted_constant.items()},
                  "exhaustive": chk.exhaustive}


def _exp_cosine(cfg):
    g = cfg.grid
    ps = g.get("p", [4, 8, 12])
    corpus = cosine_corpus(cfg.samples, cfg.rng_seed, g.get("a", 0.01), g.get("max_m", 40))
    dh = _hash_obj({"corpus": cfg.samples, "a": g.get("a", 0.01), "max_m": g.get("max_m", 40)})
    fitted = {}
    rows = []
    for p in ps:
        K, worst = fit_cosine_constant(corpus, p)
        fitted[p] = K
        rows.append(_row(f"p={p}", "fitted_constant", K, None, None, None, None, cfg.samples, cfg.rng_seed, dh))
    vals = list(fitted.values())
    mean = sum(vals) / len(vals)
    spread = max(abs(x - mean) for x in vals) / mean if mean > 0 else 0.0
    tol = float(g.get("tolerance", 0.2))
    rows.append(_row("all", "relative_spread", spread, None, None, tol, spread <= tol, cfg.samples, cfg.rng_seed, dh))
    return rows, {"fitted": {str(p): k for p, k in fitted.items()}}


def _exp_norms(cfg):
    g = cfg.grid
    sched = SmallAlphaSchedule(int(g["n"]), float(g["delta"]), g.get("C", 4))
    vecs = build_vectors(cfg.vectors)
    rate = float(g.get("rate", 0.01))
    trials = cfg.samples
    stages = sched.stages
    bad2 = np.zeros(stages + 1, dtype=np.int64)
    bad4 = np.zeros(stages + 1, dtype=np.int64)
    ss = np.random.SeedSequence(cfg.rng_seed)
    for r, child in enumerate(ss.spawn(trials)):
        v = vecs[r % len(vecs)]
        traj = norm_trajectory(v, sched, child)
        bounds = norm_bounds(v, sched)
        for i, (l2, l4, _) in enumerate(traj):
            if i >= len(bounds):
                break
            b2, b4 = bounds[i]
            bad2[i] += l2 > b2 * (1 + 1e-12)
            bad4[i] += l4 > b4 * (1 + 1e-12)
    dh = _hash_obj(sched.to_dict())
    rows = []
    for name, bad in (("l2", bad2), ("l4", bad4)):
        for i in range(min(stages + 1, len(sched.sizes))):
            lo, hi = clopper_pearson(int(bad[i]), trials)
            rows.append(_row(f"stage={i + 1};norm={name}", "violation_rate", bad[i] / trials, lo, hi, rate,
                             lo <= rate, trials, cfg.rng_seed, dh))
    return rows, {"schedule": sched.to_dict()}


def _exp_inw(cfg):
    g = cfg.grid
    S, D, T, eps = int(g["S"]), int(g["D"]), int(g["T"]), float(g["eps"])
    gen = INWGenerator(S, D, T, eps, g.get("budget"))
    dh = gen.descriptor_hash()
    count = int(g.get("count", 100))
    progs = robp_corpus(S, D, T, count, g.get("corpus_seed", cfg.rng_seed))
    exh = gen.seed_length <= MAX_EXHAUSTIVE_SEED
    split = _split_route(gen) and not exh
    rng = np.random.default_rng(cfg.rng_seed)
    rows = []
    for j, M in enumerate(progs):
        want = exhaustive_acceptance(M)
        if split:
            got = exact_generator_acceptance(M, gen)
        else:
            got = generator_acceptance(M, gen, exhaustive=exh, samples=cfg.samples, rng=rng)
        gap = abs(got - want)
        if exh or split:
            lo = hi = gap
            n = 1 << gen.seed_length
        else:
            n = cfg.samples
            plo, phi = clopper_pearson(int(round(got * n)), n)
            lo, hi = max(0.0, plo - want, want - phi), max(abs(plo - want), abs(phi - want))
        rows.append(_row(f"program={j}", "acceptance_gap", gap, lo, hi, eps, lo <= eps, n, cfg.rng_seed, dh))
    return rows, {"descriptor": gen.descriptor(), "exhaustive": exh or split,
                  "route": "enumeration" if exh else "split" if split else "sampled"}


def _split_route(gen):
    """True when the exact route over lower-level seeds applies to ``gen``."""
    if gen.T < 2 or gen.T != 1 << gen.K:
        return False
    try:
        _lower_blocks(gen)
    except CapacityError:
        return False
    return True


def _exp_calibrate(cfg):
    g = cfg.grid
    cert = calibrate_base(int(g["n"]), float(g["eps"]), g.get("probes", 24), cfg.samples, cfg.rng_seed,
                          g.get("k_max")).certificate
    dh = _hash_obj(cert.summary())
    rows = [_row(f"n={cert.n};k={cert.k}", "worst_probe_dtv", cert.worst, None, None, cert.eps,
                 cert.worst <= cert.eps, cert.samples, cert.rng_seed, dh)]
    return rows, {"certificate": cert.to_dict()}


_RUNNERS = {"tail": _exp_tail, "tv": _exp_tv, "fourier": _exp_fourier, "spreading": _exp_spreading,
            "moments": _exp_moments, "cosine-approx": _exp_cosine, "norm-trajectory": _exp_norms,
            "inw-fooling": _exp_inw, "calibrate-base": _exp_calibrate}


def run_experiment(cfg):
    """Execute ``cfg`` and return the report dict; nothing is written."""
    rows, extra = _RUNNERS[cfg.kind](cfg)
    for r in rows:
        r["experiment"] = cfg.kind
    return {"schema": SCHEMA_VERSION, "version": __version__, "experiment": cfg.kind, "config": cfg.to_dict(),
            "level": LEVEL, "interval": "exact binomial (Clopper-Pearson) unless the row statistic says otherwise",
            "rows": rows, "details": extra}


def run(cfg):
    """Execute ``cfg`` and write its reports under ``cfg.out``; returns the written paths."""
    report = run_experiment(cfg)
    paths = []
    stem = os.path.join(cfg.out, cfg.kind)
    if cfg.format in ("json", "both"):
        atomic_write(stem + ".json", report_json(report))
        paths.append(stem + ".json")
    if cfg.format in ("csv", "both"):
        atomic_write(stem + ".csv", report_csv(report))
        paths.append(stem + ".csv")
    return paths


# ------------------------------------------------------------ generator output

def generate(gen, seed, count):
    """Outputs on seeds seed, seed+1, ... (mod 2^r) as a (count, n) int8 array."""
    r = gen.seed_length
    if seed < 0 or seed >> r:
        raise ConfigurationError(f"seed 0x{seed:x} does not fit in the {r}-bit seed")
    if count == 0:
        return np.zeros((0, gen.output_length), dtype=np.int8)
    mask = (1 << r) - 1
    seeds = np.array([Seed.from_int((seed + j) & mask, r).bits for j in range(count)], dtype=np.uint8)
    return gen.expand_batch(seeds.reshape(count, r))


def encode_text(rows):
    return "".join(" ".join("+1" if x > 0 else "-1" for x in row) + "\n" for row in rows)


def decode_text(text):
    return [SignVector.from_signs([int(tok) for tok in line.split()]) for line in text.splitlines() if line.strip()]


def encode_packed(rows, n):
    out = [PACKED_MAGIC, struct.pack("<I", n)]
    for row in rows:
        out.append(SignVector.from_signs(row).packed.tobytes())
    return b"".join(out)


def decode_packed(data):
    if data[:8] != PACKED_MAGIC:
        raise ConfigurationError("not a packed sign-vector stream")
    (n,) = struct.unpack("<I", data[8:12])
    w = (n + 7) // 8
    body = data[12:]
    if w == 0 or len(body) % w:
        if w == 0 and not body:
            return n, []
        raise ConfigurationError("truncated packed stream")
    return n, [SignVector(np.frombuffer(body[i:i + w], dtype=np.uint8), n) for i in range(0, len(body), w)]


# ------------------------------------------------------------ entry point

def _load_json(path):
    with open(path) as fh:
        text = fh.read()
    try:
        return json.loads(text), text
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, e.lineno, path) from None


def _generator_spec(path):
    d, text = _load_json(path)
    spec = d.get("generator", d) if isinstance(d, dict) else d
    try:
        return spec, build_generator(spec)
    except ConfigurationError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e), _key_line(text, "type"), path) from None


def _parser():
    p = argparse.ArgumentParser(prog="derandprg", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, hlp in (("run", "run an experiment config"), ("gen", "emit generator outputs"),
                      ("calibrate-base", "calibrate the base generator"), ("describe", "print a generator descriptor")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--config", required=name != "calibrate-base", help="JSON config or generator spec")
        s.add_argument("--out", help="output directory (run, calibrate-base) or file (gen)")
        s.add_argument("--seed", help="hex seed: experiment RNG seed for run, first generator seed for gen")
        s.add_argument("--samples", type=int, help="sample count override; output count for gen")
        s.add_argument("--format", choices=("json", "csv", "both"))
        if name == "gen":
            s.add_argument("--emit", choices=("text", "packed"), default="text")
        if name == "calibrate-base":
            s.add_argument("--n", type=int)
            s.add_argument("--eps", type=float)
    return p


def _hex(text):
    try:
        return int(text, 16)
    except ValueError:
        raise ConfigurationError(f"--seed {text!r} is not hexadecimal") from None


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigurationError, CapacityError, CalibrationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args):
    if args.command == "run":
        cfg = ExperimentConfig.load(args.config)
        if args.out is not None:
            cfg.out = args.out
        if args.seed is not None:
            cfg.rng_seed = _hex(args.seed)
        if args.samples is not None:
            cfg.samples = args.samples
        if args.format is not None:
            cfg.format = args.format
        for path in run(cfg):
            print(path)
        return 0
    if args.command == "describe":
        spec, gen = _generator_spec(args.config)
        print(json.dumps({"descriptor": gen.descriptor(), "descriptor_hash": gen.descriptor_hash(), "spec": spec},
                         indent=2, sort_keys=True, default=_plain))
        return 0
    if args.command == "gen":
        _, gen = _generator_spec(args.config)
        rows = generate(gen, _hex(args.seed) if args.seed else 0, args.samples or 0)
        data = encode_packed(rows, gen.output_length) if args.emit == "packed" else encode_text(rows)
        if args.out:
            atomic_write(args.out, data)
        elif isinstance(data, bytes):
            sys.stdout.buffer.write(data)
        else:
            sys.stdout.write(data)
        return 0
    # calibrate-base
    n, eps = args.n, args.eps
    samples, rng_seed, probes = 20000, 0, 24
    if args.config:
        d, _ = _load_json(args.config)
        g = d.get("grid", d)
        n = n if n is not None else g.get("n")
        eps = eps if eps is not None else g.get("eps")
        probes = g.get("probes", probes)
        samples = d.get("samples", samples)
        rng_seed = d.get("rng_seed", rng_seed)
    if n is None or eps is None:
        raise ConfigurationError("calibrate-base needs n and eps (flags or config)")
    if args.samples is not None:
        samples = args.samples
    if args.seed is not None:
        rng_seed = _hex(args.seed)
    cert = calibrate_base(int(n), float(eps), probes, samples, rng_seed).certificate
    path = os.path.join(args.out or ".", f"base-n{n}-eps{eps:g}.json")
    atomic_write(path, cert.to_json() + "\n")
    print(json.dumps(cert.summary(), indent=2, sort_keys=True))
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
