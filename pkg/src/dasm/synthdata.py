"""Synthetic multi-domain cover/stego benchmark and an LSB-on-PCM generator.

Feature benchmark: cover rows are standard normal in R^d. A stego row of domain
k at embedding rate ER is an independent standard-normal carrier shifted by
``ER * base_gap_k`` along the domain's unit direction (dense for ``mean-shift``,
supported on a few coordinates for ``sparse-subspace``). Carriers are drawn per
(domain, class) and reused across embedding rates, so the rate is the only thing
that changes between ER slices of the same benchmark.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

DEFAULT_RATES = (0.1, 0.2, 0.3, 0.4, 0.5)
KINDS = ("mean-shift", "sparse-subspace")


@dataclass
class DomainSpec:
    name: str
    base_gap: float
    seed: int
    kind: str = "mean-shift"
    subspace_dim: int = 4

    def __post_init__(self):
        if self.base_gap < 0:
            raise ValueError(f"base_gap must be >= 0 for domain {self.name}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")


def default_domains() -> list[DomainSpec]:
    # PMS-like is the hardest (smallest gap), AHCM-like the easiest
    return [
        DomainSpec("QIM", 1.0, 101, "sparse-subspace"),
        DomainSpec("PMS", 0.5, 102, "sparse-subspace"),
        DomainSpec("LSB", 2.0, 103, "mean-shift"),
        DomainSpec("AHCM", 3.0, 104, "mean-shift"),
    ]


@dataclass
class BenchmarkConfig:
    input_dim: int = 32
    domains: list[DomainSpec] = field(default_factory=default_domains)
    embedding_rates: tuple[float, ...] = DEFAULT_RATES
    n_per_cell: int = 2000
    seed: int = 0
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)

    def __post_init__(self):
        self.domains = [d if isinstance(d, DomainSpec) else DomainSpec(**d) for d in self.domains]
        self.embedding_rates = tuple(float(r) for r in self.embedding_rates)
        self.split = tuple(float(s) for s in self.split)
        if self.input_dim < 1 or self.n_per_cell < 1:
            raise ValueError("input_dim and n_per_cell must be positive")
        if not self.domains or not self.embedding_rates:
            raise ValueError("need at least one domain and one embedding rate")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        for d in self.domains:
            if d.kind == "sparse-subspace" and d.subspace_dim > self.input_dim:
                raise ValueError(f"input_dim {self.input_dim} too small for a "
                                 f"{d.subspace_dim}-dim subspace in domain {d.name}")

    @property
    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["embedding_rates"] = list(self.embedding_rates)
        out["split"] = list(self.split)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        return cls(**d)


def domain_direction(spec: DomainSpec, dim: int) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "mean-shift":
        u = rng.standard_normal(dim)
    else:
        u = np.zeros(dim)
        coords = rng.choice(dim, size=spec.subspace_dim, replace=False)
        u[coords] = rng.choice([-1.0, 1.0], size=spec.subspace_dim)
    return u / np.linalg.norm(u)


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    group: np.ndarray
    er: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def select(self, mask) -> "Split":
        return Split(self.x[mask], self.y[mask], self.d[mask], self.group[mask],
                     self.er[mask], self.ids[mask])

    @staticmethod
    def concat(parts: list["Split"]) -> "Split":
        return Split(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("x", "y", "d", "group", "er", "ids")))


@dataclass
class Benchmark:
    config: BenchmarkConfig
    train: Split
    val: Split
    test: Split

    @property
    def domain_names(self) -> list[str]:
        return self.config.domain_names

    def splits(self) -> dict[str, Split]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def at_er(self, er: float) -> "Benchmark":
        pick = {k: s.select(np.isclose(s.er, er)) for k, s in self.splits().items()}
        if len(pick["train"]) == 0:
            raise ValueError(f"embedding rate {er} not in benchmark")
        cfg = replace(self.config, embedding_rates=(float(er),))
        return Benchmark(cfg, pick["train"], pick["val"], pick["test"])


def _split_counts(n: int, fracs) -> tuple[int, int]:
    n_train = int(round(fracs[0] * n))
    n_val = int(round(fracs[1] * n))
    return n_train, n_val


def gen_feature_benchmark(cfg: BenchmarkConfig) -> Benchmark:
    """Balanced cover/stego cells for every (domain, ER), split 70/15/15 per cell."""
    n, dim = cfg.n_per_cell, cfg.input_dim
    n_train, n_val = _split_counts(n, cfg.split)
    parts = {"train": [], "val": [], "test": []}
    next_id = 0
    for k, spec in enumerate(cfg.domains, start=1):
        u = domain_direction(spec, dim)
        carriers = {}
        for cls in (0, 1):
            ss = np.random.SeedSequence([cfg.seed, k, cls])
            rng = np.random.default_rng(ss)
            carriers[cls] = (rng.standard_normal((n, dim)), rng.permutation(n))
        for er in cfg.embedding_rates:
            for cls in (0, 1):
                base, perm = carriers[cls]
                x = base + (er * spec.base_gap) * u if cls == 1 else base.copy()
                ids = next_id + np.arange(n)
                next_id += n
                cell = Split(x, np.full(n, cls), np.full(n, k if cls else 0),
                             np.full(n, k), np.full(n, er), ids)
                parts["train"].append(cell.select(perm[:n_train]))
                parts["val"].append(cell.select(perm[n_train:n_train + n_val]))
                parts["test"].append(cell.select(perm[n_train + n_val:]))
    splits = {k: Split.concat(v) for k, v in parts.items()}
    for s in splits.values():
        s.y = s.y.astype(np.int64)
        s.d = s.d.astype(np.int64)
        s.group = s.group.astype(np.int64)
        s.ids = s.ids.astype(np.int64)
    return Benchmark(cfg, splits["train"], splits["val"], splits["test"])


# ---------------------------------------------------------------- persistence

_MAGIC = b"DASMDATA"


def write_split(path, split: Split, header: dict) -> None:
    """Binary split: magic, u64 header length, JSON header, then the columns.

    Columns in order: x (float64, row-major), er (float64), ids (int64),
    y, d, group (uint8). All little-endian.
    """
    n, dim = split.x.shape if split.x.ndim == 2 else (0, 0)
    header = dict(header, rows=int(n), dim=int(dim),
                  layout=["x:<f8[rows,dim]", "er:<f8[rows]", "ids:<i8[rows]",
                          "y:u1[rows]", "d:u1[rows]", "group:u1[rows]"])
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(split.x.astype("<f8").tobytes())
        fh.write(split.er.astype("<f8").tobytes())
        fh.write(split.ids.astype("<i8").tobytes())
        for col in (split.y, split.d, split.group):
            fh.write(col.astype("u1").tobytes())


def read_split(path) -> tuple[Split, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a dataset split file")
    (hn,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hn])
    n, dim = header["rows"], header["dim"]
    off = 16 + hn

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    x = take("<f8", n * dim).reshape(n, dim).astype(np.float64)
    er = take("<f8", n).astype(np.float64)
    ids = take("<i8", n).astype(np.int64)
    y, d, g = (take("u1", n).astype(np.int64) for _ in range(3))
    return Split(x, y, d, g, er, ids), header


def write_split_csv(path, split: Split) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        fh.write("# schema=1\n")
        w.writerow(["id", "er", "y", "d", "group"] + [f"x{i}" for i in range(split.x.shape[1])])
        for i in range(len(split)):
            w.writerow([int(split.ids[i]), repr(float(split.er[i])), int(split.y[i]),
                        int(split.d[i]), int(split.group[i])]
                       + [repr(float(v)) for v in split.x[i]])


def save_benchmark(bench: Benchmark, out_dir, csv_mirror: bool = True) -> dict:
    """Write ``benchmark.json`` plus ``<split>.bin`` (and ``.csv``); returns sha256 per file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": bench.config.to_dict(), "domain_names": bench.domain_names}
    sums = {}
    for name, split in bench.splits().items():
        p = out / f"{name}.bin"
        write_split(p, split, {"split": name, "seed": bench.config.seed,
                               "counts": _counts(split)})
        sums[p.name] = file_sha256(p)
        if csv_mirror:
            write_split_csv(out / f"{name}.csv", split)
    meta["sha256"] = sums
    (out / "benchmark.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return sums


def load_benchmark(out_dir, verify: bool = True) -> Benchmark:
    out = Path(out_dir)
    meta = json.loads((out / "benchmark.json").read_text())
    cfg = BenchmarkConfig.from_dict(meta["config"])
    splits = {}
    for name in ("train", "val", "test"):
        p = out / f"{name}.bin"
        if verify and meta.get("sha256", {}).get(p.name) not in (None, file_sha256(p)):
            raise ValueError(f"checksum mismatch for {p}")
        splits[name], _ = read_split(p)
    return Benchmark(cfg, splits["train"], splits["val"], splits["test"])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _counts(split: Split) -> dict:
    out = {}
    for g, er, y in sorted(set(zip(split.group.tolist(), split.er.tolist(), split.y.tolist()))):
        m = (split.group == g) & (split.er == er) & (split.y == y)
        out[f"g{g}_er{er}_y{y}"] = int(m.sum())
    return out


# ---------------------------------------------------------------- LSB on PCM

@dataclass
class PcmClip:
    samples: np.ndarray
    rate: int = 8000

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.size and (s.min() < -32768 or s.max() > 32767):
            raise ValueError("PCM samples outside the 16-bit range")
        self.samples = s.astype(np.int16)

    def __len__(self) -> int:
        return self.samples.size


def _synth_cover(rng: np.random.Generator, clip_len: int, rate: int) -> np.ndarray:
    t = np.arange(clip_len) / rate
    n_tones = rng.integers(2, 5)
    sig = np.zeros(clip_len)
    for _ in range(n_tones):
        f = rng.uniform(80.0, 3400.0)
        sig += rng.uniform(500.0, 4000.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    sig += rng.normal(0.0, 40.0, clip_len)
    pcm = np.clip(np.rint(sig), -32768, 32767).astype(np.int64)
    # codec-style requantization clears the LSB of about half the samples
    cleared = rng.random(clip_len) < 0.5
    pcm[cleared] &= ~1
    return pcm.astype(np.int16)


def gen_lsb_pcm(n_clips: int, clip_len: int, er: float, seed: int,
                rate: int = 8000) -> tuple[list[PcmClip], list[PcmClip]]:
    """Cover clips and their LSB-replacement stego versions.

    A fraction ``er`` of each clip's samples (chosen at random) get their LSB
    overwritten by a random bit; covers do not depend on ``er``.
    """
    if not 0.0 <= er <= 1.0:
        raise ValueError(f"embedding rate must lie in [0, 1], got {er}")
    cover_ss, embed_ss = np.random.SeedSequence(seed).spawn(2)
    cover_rng = np.random.default_rng(cover_ss)
    embed_rng = np.random.default_rng(embed_ss)
    covers, stegos = [], []
    n_embed = int(round(er * clip_len))
    for _ in range(n_clips):
        cover = _synth_cover(cover_rng, clip_len, rate)
        stego = cover.astype(np.int64)
        pos = embed_rng.choice(clip_len, size=n_embed, replace=False)
        bits = embed_rng.integers(0, 2, size=n_embed)
        stego[pos] = (stego[pos] & ~1) | bits
        covers.append(PcmClip(cover, rate))
        stegos.append(PcmClip(stego.astype(np.int16), rate))
    return covers, stegos


RUN_BINS = (1, 2, 3, 4, 5, 9, 17, 33)   # lower edges; last bin is open
N_PCM_FEATURES = 1 + len(RUN_BINS) + 3 + 4


def _run_lengths(bits: np.ndarray) -> np.ndarray:
    change = np.flatnonzero(np.diff(bits)) + 1
    edges = np.concatenate([[0], change, [bits.size]])
    return np.diff(edges)


def extract_features(clip: PcmClip) -> np.ndarray:
    """16 statistics: LSB mean, LSB run-length histogram (8 bins), three
    sample-pair parity rates, and four first-difference moments."""
    s = np.asarray(clip.samples, dtype=np.int64)
    if s.size < 64:
        raise ValueError(f"clip too short for feature extraction ({s.size} < 64 samples)")
    lsb = s & 1
    runs = _run_lengths(lsb)
    hist = np.histogram(runs, bins=list(RUN_BINS) + [np.inf])[0] / runs.size
    adjacent_equal = float(np.mean(lsb[1:] == lsb[:-1]))
    m = s.size // 2 * 2
    pair_equal = float(np.mean(lsb[0:m:2] == lsb[1:m:2]))
    diff = np.diff(s).astype(np.float64)
    odd_step = float(np.mean(np.abs(diff) % 2 == 1))
    mu, sd = diff.mean(), diff.std()
    if sd > 0:
        zc = (diff - mu) / sd
        skew, kurt = float(np.mean(zc ** 3)), float(np.mean(zc ** 4) - 3.0)
    else:
        skew = kurt = 0.0
    moments = [mu / (sd + 1.0), np.log1p(sd), skew, kurt]
    return np.concatenate([[lsb.mean()], hist, [adjacent_equal, pair_equal, odd_step], moments])
