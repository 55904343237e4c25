"""Dataset construction from peak files and genomes, plus synthetic benchmarks.

Coordinates are 0-based half-open throughout. Sequences use the alphabet
{A, C, G, T, N}; N one-hot encodes to an all-zero row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

logger = logging.getLogger(__name__)

BASES = "ACGT"
_BASE_INDEX = np.full(256, -1, dtype=np.int64)
for _i, _b in enumerate(BASES + "N"):
    _BASE_INDEX[ord(_b)] = _i
_ONE_HOT_ROWS = np.vstack([np.eye(4, dtype=np.float32),
                           np.zeros((1, 4), dtype=np.float32)])
_COMPLEMENT = str.maketrans("ACGTN", "TGCAN")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class GenomicInterval:
    chrom: str
    start: int
    end: int
    tf: str = ""

    def __post_init__(self):
        if self.start < 0 or self.start >= self.end:
            raise DataError(
                f"invalid interval {self.chrom}:{self.start}-{self.end}")


@dataclass(frozen=True)
class LabeledRegion:
    chrom: str
    start: int
    end: int
    labels: frozenset[str]

    def __post_init__(self):
        if not self.labels:
            raise DataError("region must carry at least one label")
        if self.start < 0 or self.start >= self.end:
            raise DataError(
                f"invalid region {self.chrom}:{self.start}-{self.end}")

    @property
    def midpoint(self) -> int:
        return (self.start + self.end) // 2

    @property
    def origin(self) -> str:
        return f"{self.chrom}:{self.start}-{self.end}"


def _lines(stream) -> Iterable[str]:
    if isinstance(stream, str):
        return stream.splitlines()
    return stream


def parse_bed(stream, tf: str = "") -> list[GenomicInterval]:
    """Read tab-separated intervals; track/browser/# lines are skipped."""
    intervals = []
    for lineno, raw in enumerate(_lines(stream), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith(("track", "browser", "#")):
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise DataError(f"line {lineno}: expected >=3 tab-separated fields")
        try:
            start, end = int(parts[1]), int(parts[2])
        except ValueError:
            raise DataError(f"line {lineno}: non-integer coordinates") from None
        if start < 0 or start >= end:
            raise DataError(f"line {lineno}: start {start} must precede end {end}")
        intervals.append(GenomicInterval(parts[0], start, end, tf))
    return intervals


def parse_fasta(stream) -> dict[str, str]:
    """Read sequences keyed by the first token of each header; uppercased."""
    genome: dict[str, str] = {}
    name: Optional[str] = None
    parts: list[str] = []

    def flush():
        if name is not None:
            genome[name] = "".join(parts)

    for lineno, raw in enumerate(_lines(stream), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            name = line[1:].split()[0] if len(line) > 1 else ""
            if not name:
                raise DataError(f"line {lineno}: empty FASTA header")
            if name in genome:
                raise DataError(f"line {lineno}: duplicate sequence name {name!r}")
            parts = []
        else:
            if name is None:
                raise DataError(f"line {lineno}: sequence before first header")
            chunk = line.upper()
            bad = set(chunk) - set("ACGTN")
            if bad:
                raise DataError(
                    f"line {lineno}: invalid characters {sorted(bad)}")
            parts.append(chunk)
    flush()
    return genome


def intersect_peaks(peak_sets: dict[str, list[GenomicInterval]]) -> list[LabeledRegion]:
    """Partition per-chromosome peak coverage into maximal constant-label regions.

    Same-TF overlaps are unioned first; every emitted region carries the
    full set of TFs covering it, and touching regions with identical label
    sets are merged.
    """
    by_chrom: dict[str, list[tuple[int, int, str]]] = {}
    for tf, intervals in peak_sets.items():
        merged: dict[str, list[list[int]]] = {}
        for iv in sorted(intervals, key=lambda iv: (iv.chrom, iv.start, iv.end)):
            spans = merged.setdefault(iv.chrom, [])
            if spans and iv.start <= spans[-1][1]:
                spans[-1][1] = max(spans[-1][1], iv.end)
            else:
                spans.append([iv.start, iv.end])
        for chrom, spans in merged.items():
            by_chrom.setdefault(chrom, []).extend(
                (s, e, tf) for s, e in spans)

    regions: list[LabeledRegion] = []
    for chrom in sorted(by_chrom):
        events: list[tuple[int, int, str]] = []
        for start, end, tf in by_chrom[chrom]:
            events.append((start, 1, tf))
            events.append((end, -1, tf))
        events.sort(key=lambda e: e[0])

        active: dict[str, int] = {}
        segments: list[tuple[int, int, frozenset[str]]] = []
        prev_pos = None
        idx = 0
        while idx < len(events):
            pos = events[idx][0]
            if prev_pos is not None and pos > prev_pos and active:
                segments.append((prev_pos, pos, frozenset(active)))
            while idx < len(events) and events[idx][0] == pos:
                _, delta, tf = events[idx]
                active[tf] = active.get(tf, 0) + delta
                if active[tf] == 0:
                    del active[tf]
                idx += 1
            prev_pos = pos

        for start, end, labels in segments:
            if regions and regions[-1].chrom == chrom \
                    and regions[-1].end == start and regions[-1].labels == labels:
                regions[-1] = LabeledRegion(chrom, regions[-1].start, end, labels)
            else:
                regions.append(LabeledRegion(chrom, start, end, labels))
    return regions


def extract_window(genome: dict[str, str], region: LabeledRegion,
                   window: int = 1000) -> Optional[str]:
    """Window of ``window`` bases centred at the region midpoint, or None
    when it would run past the chromosome ends."""
    if region.chrom not in genome:
        raise DataError(f"chromosome {region.chrom!r} absent from genome")
    seq = genome[region.chrom]
    start = region.midpoint - window // 2
    if start < 0 or start + window > len(seq):
        return None
    return seq[start:start + window]


def one_hot(sequence: str) -> np.ndarray:
    """[L, 4] float32 in channel order A, C, G, T; N maps to an all-zero row."""
    codes = _BASE_INDEX[np.frombuffer(sequence.encode("ascii"), dtype=np.uint8)]
    if codes.size and codes.min() < 0:
        bad = sorted(set(sequence) - set("ACGTN"))
        raise DataError(f"invalid sequence characters {bad}")
    return _ONE_HOT_ROWS[codes]


def decode_one_hot(x: np.ndarray) -> str:
    present = x.sum(axis=1) > 0
    picks = x.argmax(axis=1)
    return "".join(BASES[p] if keep else "N" for p, keep in zip(picks, present))


def reverse_complement(sequence: str) -> str:
    return sequence.translate(_COMPLEMENT)[::-1]


def dinucleotide_shuffle(sequence: str, rng: np.random.Generator) -> str:
    """Permute a sequence preserving all adjacent-pair counts and both ends.

    Euler-path shuffle on the dinucleotide transition multigraph; stretches
    separated by N are shuffled independently with the Ns left in place.
    """
    if not sequence:
        raise DataError("cannot shuffle an empty sequence")
    if "N" in sequence:
        out = []
        segment = []
        for ch in sequence:
            if ch == "N":
                if segment:
                    out.append(_euler_shuffle("".join(segment), rng))
                    segment = []
                out.append("N")
            else:
                segment.append(ch)
        if segment:
            out.append(_euler_shuffle("".join(segment), rng))
        return "".join(out)
    return _euler_shuffle(sequence, rng)


def _euler_shuffle(seq: str, rng: np.random.Generator) -> str:
    if len(seq) < 2 or len(set(seq)) == 1:
        return seq
    chars = sorted(set(seq))
    edges: dict[str, list[str]] = {c: [] for c in chars}
    for a, b in zip(seq, seq[1:]):
        edges[a].append(b)
    last = seq[-1]

    # Pick each vertex's final exit so the exits form a tree into `last`;
    # the original walk guarantees such a choice exists, so rejection ends.
    for _ in range(100000):
        finals = {c: edges[c][rng.integers(len(edges[c]))]
                  for c in chars if c != last and edges[c]}
        ok = True
        for c in finals:
            cur, hops = c, 0
            while cur != last and hops <= len(chars):
                cur = finals.get(cur, last)
                hops += 1
            if cur != last:
                ok = False
                break
        if ok:
            break
    else:  # pragma: no cover - rejection sampling always terminates
        raise RuntimeError("dinucleotide shuffle failed to converge")

    walk_lists: dict[str, list[str]] = {}
    for c in chars:
        rest = list(edges[c])
        if c in finals:
            rest.remove(finals[c])
        order = rng.permutation(len(rest))
        rest = [rest[i] for i in order]
        if c in finals:
            rest.append(finals[c])
        walk_lists[c] = rest

    out = [seq[0]]
    cursor = {c: 0 for c in chars}
    node = seq[0]
    for _ in range(len(seq) - 1):
        nxt = walk_lists[node][cursor[node]]
        cursor[node] += 1
        out.append(nxt)
        node = nxt
    return "".join(out)


@dataclass
class EncodedDataset:
    """Aligned sequences, binary label matrix, and the label-name registry."""

    label_names: list[str]
    sequences: list[str]
    labels: np.ndarray  # [N, k] uint8
    origins: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        n, k = len(self.sequences), len(self.label_names)
        if self.labels.shape != (n, k):
            raise DataError(
                f"label matrix {self.labels.shape} does not match "
                f"{n} samples x {k} labels")
        if not self.origins:
            self.origins = ["synthetic:0-0"] * n
        if len(self.origins) != n:
            raise DataError("origins do not align with samples")
        if n:
            length = len(self.sequences[0])
            if any(len(s) != length for s in self.sequences):
                raise DataError("sequences must share one length")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be binary")
        if k > 1 and n and not self.labels.any(axis=1).all():
            raise DataError("multi-label samples need at least one label")
        self._onehot: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    @property
    def sequence_length(self) -> int:
        return len(self.sequences[0]) if self.sequences else 0

    def onehot(self) -> np.ndarray:
        """[N, L, 4] float32 stack of the one-hot encoded sequences."""
        if self._onehot is None:
            if not self.sequences:
                self._onehot = np.zeros((0, 0, 4), dtype=np.float32)
            else:
                self._onehot = np.stack([one_hot(s) for s in self.sequences])
        return self._onehot

    def subset(self, indices) -> "EncodedDataset":
        indices = np.asarray(indices, dtype=np.int64)
        out = EncodedDataset(
            label_names=list(self.label_names),
            sequences=[self.sequences[i] for i in indices],
            labels=self.labels[indices].copy(),
            origins=[self.origins[i] for i in indices])
        planted = getattr(self, "planted", None)
        if planted is not None:
            out.planted = [planted[i] for i in indices]
        return out


def build_dataset(peak_sets: dict[str, list[GenomicInterval]],
                  genome: dict[str, str], window: int = 1000) -> EncodedDataset:
    """Intersect peaks, window each region's midpoint, and encode labels."""
    label_names = list(peak_sets)
    index = {name: i for i, name in enumerate(label_names)}
    regions = intersect_peaks(peak_sets)
    sequences, rows, origins = [], [], []
    skipped = 0
    for region in regions:
        seq = extract_window(genome, region, window)
        if seq is None:
            skipped += 1
            continue
        row = np.zeros(len(label_names), dtype=np.uint8)
        for tf in region.labels:
            row[index[tf]] = 1
        sequences.append(seq)
        rows.append(row)
        origins.append(region.origin)
    if skipped:
        logger.info("skipped %d regions whose window exceeds chromosome bounds",
                    skipped)
    labels = np.array(rows, dtype=np.uint8) if rows else np.zeros(
        (0, len(label_names)), dtype=np.uint8)
    return EncodedDataset(label_names, sequences, labels, origins)


@dataclass
class SyntheticSpec:
    """Planted-motif generator settings.

    Label sets are drawn by independent Bernoulli marginals, forced
    non-empty when there is more than one label, then coupled pairwise:
    with probability ``co_occurrence[(a, b)]`` both labels switch on
    whenever either is on. Active labels plant their consensus motif
    (per-base mutation probability ``noise``) at a uniform position on a
    uniform random background.
    """

    num_samples: int
    length: int
    label_motifs: dict[str, str]
    marginals: Optional[dict[str, float]] = None
    co_occurrence: dict[tuple[str, str], float] = field(default_factory=dict)
    noise: float = 0.0

    def __post_init__(self):
        if self.num_samples < 1 or self.length < 1:
            raise DataError("num_samples and length must be positive")
        if not self.label_motifs:
            raise DataError("at least one label motif is required")
        for name, motif in self.label_motifs.items():
            if not motif or set(motif) - set(BASES):
                raise DataError(f"motif for {name!r} must be non-empty A/C/G/T")
            if len(motif) > self.length:
                raise DataError(
                    f"motif for {name!r} is longer than the sequence length")
        if self.marginals is None:
            self.marginals = {name: 0.5 for name in self.label_motifs}
        if set(self.marginals) != set(self.label_motifs):
            raise DataError("marginals must cover exactly the motif labels")
        for name, p in self.marginals.items():
            if not 0.0 <= p <= 1.0:
                raise DataError(f"marginal for {name!r} outside [0, 1]")
        names = set(self.label_motifs)
        for (a, b), c in self.co_occurrence.items():
            if a not in names or b not in names or a == b:
                raise DataError(f"bad co-occurrence pair ({a!r}, {b!r})")
            if not 0.0 <= c <= 1.0:
                raise DataError("co-occurrence probabilities must be in [0, 1]")
        if not 0.0 <= self.noise <= 1.0:
            raise DataError("noise must be in [0, 1]")


def sample_label_vector(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    names = list(spec.label_motifs)
    k = len(names)
    probs = np.array([spec.marginals[n] for n in names])
    active = rng.random(k) < probs
    if k > 1 and not active.any():
        active[rng.integers(k)] = True
    pairs = sorted(spec.co_occurrence.items(),
                   key=lambda item: (names.index(item[0][0]), names.index(item[0][1])))
    for (a, b), c in pairs:
        if c > 0 and rng.random() < c:
            ia, ib = names.index(a), names.index(b)
            if active[ia] or active[ib]:
                active[ia] = active[ib] = True
    return active.astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec,
                       rng: np.random.Generator) -> EncodedDataset:
    names = list(spec.label_motifs)
    sequences, rows, plant_log = [], [], []
    for _ in range(spec.num_samples):
        y = sample_label_vector(spec, rng)
        background = rng.integers(0, 4, size=spec.length)
        plants = []
        for li, name in enumerate(names):
            if not y[li]:
                continue
            motif = np.frombuffer(spec.label_motifs[name].encode(), dtype=np.uint8)
            codes = _BASE_INDEX[motif].copy()
            if spec.noise > 0:
                flips = rng.random(codes.size) < spec.noise
                # adding 1..3 mod 4 always lands on a different base
                codes[flips] = (codes[flips] + rng.integers(1, 4, codes.size)[flips]) % 4
            pos = int(rng.integers(0, spec.length - codes.size + 1))
            background[pos:pos + codes.size] = codes
            plants.append((name, pos, codes.size))
        sequences.append("".join(BASES[c] for c in background))
        rows.append(y)
        plant_log.append(plants)
    ds = EncodedDataset(names, sequences, np.array(rows, dtype=np.uint8))
    ds.planted = plant_log  # ground truth kept for motif-recovery checks
    return ds


def split_dataset(ds: EncodedDataset, train_frac: float,
                  val_frac_of_train: float, seed: int):
    """Seed-deterministic (train, val, test) partition with floored sizes."""
    if not 0.0 < train_frac < 1.0 or not 0.0 < val_frac_of_train < 1.0:
        raise DataError("split fractions must lie strictly between 0 and 1")
    n = len(ds)
    pool = int(n * train_frac)
    n_val = int(pool * val_frac_of_train)
    n_train = pool - n_val
    if n_train == 0 or n_val == 0 or n - pool == 0:
        raise DataError(f"split of {n} samples leaves an empty part")
    order = np.random.default_rng(seed).permutation(n)
    return (ds.subset(order[:n_train]),
            ds.subset(order[n_train:pool]),
            ds.subset(order[pool:]))


def save_dataset(ds: EncodedDataset, path, header_lines: Iterable[str] = ()):
    with open(path, "w", encoding="ascii") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("#labels\t" + ",".join(ds.label_names) + "\n")
        for origin, seq, row in zip(ds.origins, ds.sequences, ds.labels):
            active = [name for name, on in zip(ds.label_names, row) if on]
            fh.write(f"{origin}\t{seq}\t{','.join(active)}\n")


def load_dataset(path) -> EncodedDataset:
    label_names: Optional[list[str]] = None
    sequences, rows, origins = [], [], []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#labels\t"):
                if label_names is not None:
                    raise DataError(f"line {lineno}: duplicate #labels header")
                label_names = [s for s in line.split("\t", 1)[1].split(",") if s]
                if not label_names:
                    raise DataError(f"line {lineno}: empty label registry")
                continue
            if line.startswith("#"):
                continue
            if label_names is None:
                raise DataError(f"line {lineno}: record before #labels header")
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"line {lineno}: expected 3 tab-separated fields")
            origin, seq, label_field = parts
            seq = seq.upper()
            if set(seq) - set("ACGTN"):
                raise DataError(f"line {lineno}: invalid sequence characters")
            active = [s for s in label_field.split(",") if s]
            if not active and len(label_names) > 1:
                raise DataError(f"line {lineno}: empty label field")
            row = np.zeros(len(label_names), dtype=np.uint8)
            for name in active:
                if name not in label_names:
                    raise DataError(f"line {lineno}: unknown label {name!r}")
                row[label_names.index(name)] = 1
            origins.append(origin)
            sequences.append(seq)
            rows.append(row)
    if label_names is None:
        raise DataError("dataset file has no #labels header")
    labels = np.array(rows, dtype=np.uint8) if rows else np.zeros(
        (0, len(label_names)), dtype=np.uint8)
    return EncodedDataset(label_names, sequences, labels, origins)
