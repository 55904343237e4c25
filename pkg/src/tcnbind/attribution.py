"""Model explanation: per-label Integrated Gradients against shuffled
baselines, seqlet extraction from attribution tracks, and greedy PWM
building from aligned seqlets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DataError, dinucleotide_shuffle, one_hot
from .model import TcnModel

logger = logging.getLogger(__name__)


@dataclass
class AttributionMap:
    label: str
    scores: np.ndarray  # [L, 4] float64
    baseline_count: int
    steps: int
    completeness_gap: float
    sequence: str = ""
    sample_id: str = ""


@dataclass
class Seqlet:
    sample_index: int
    start: int
    length: int
    scores: np.ndarray  # actual-base attribution inside the window
    label: str

    @property
    def weight(self) -> float:
        return float(np.abs(self.scores).sum())


@dataclass
class Pwm:
    matrix: np.ndarray       # [w, 4] row-stochastic
    information: np.ndarray  # per-row bits in [0, 2]
    members: int
    name: str = ""

    @property
    def width(self) -> int:
        return self.matrix.shape[0]

    def consensus(self) -> str:
        return "".join("ACGT"[i] for i in self.matrix.argmax(axis=1))

    def trimmed(self, min_info: float = 0.5) -> "Pwm":
        """Crop to the span between the first and last informative rows."""
        keep = np.flatnonzero(self.information >= min_info)
        if keep.size == 0:
            return self
        lo, hi = keep[0], keep[-1] + 1
        return Pwm(self.matrix[lo:hi], self.information[lo:hi],
                   self.members, self.name)


def make_shuffled_baselines(sequence: str, count: int,
                            rng: np.random.Generator) -> list[np.ndarray]:
    """Dinucleotide-shuffled one-hot baselines for one sequence."""
    return [one_hot(dinucleotide_shuffle(sequence, rng)) for _ in range(count)]


def integrated_gradients(model: TcnModel, x, label_index: int,
                         baselines: Sequence[np.ndarray], steps: int = 50,
                         label_name: Optional[str] = None,
                         sequence: str = "", sample_id: str = "") -> AttributionMap:
    """Midpoint-rule path integral of the target logit's input gradient.

    Per baseline x', attribution_i = (x_i - x'_i) * mean over step midpoints
    of d logit / d x_i along the straight path; the returned map averages
    the baselines and records |sum(map) - mean(F(x) - F(x'))| as the
    completeness gap. Dropout stays off throughout.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if not baselines:
        raise ValueError("at least one baseline is required")
    if not 0 <= label_index < model.config.num_labels:
        raise IndexError(
            f"label index {label_index} out of range for "
            f"{model.config.num_labels} labels")
    target = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if target.ndim != 2:
        raise ValueError("attribution input must be a single [L, 4] tensor")

    alphas = (np.arange(steps, dtype=np.float64) + 0.5) / steps
    per_baseline_maps = []
    deltas = []
    for baseline in baselines:
        base = np.asarray(baseline, dtype=np.float64)
        if base.shape != target.shape:
            raise ValueError("baseline shape does not match the input")
        diff = target - base
        points = base[None] + alphas[:, None, None] * diff[None]
        probe = Tensor(points.astype(np.float32), requires_grad=True)
        logits = model.forward(probe, training=False)
        ad.backward(ad.reduce_sum(ad.getitem(logits, (slice(None), label_index))))
        mean_grad = probe.grad.astype(np.float64).mean(axis=0)
        per_baseline_maps.append(diff * mean_grad)

        with ad.no_grad():
            pair = model.forward(Tensor(np.stack([target, base]).astype(np.float32)))
        deltas.append(float(pair.data[0, label_index] - pair.data[1, label_index]))

    scores = np.mean(per_baseline_maps, axis=0)
    gap = abs(float(scores.sum()) - float(np.mean(deltas)))
    return AttributionMap(
        label=label_name if label_name is not None else str(label_index),
        scores=scores, baseline_count=len(baselines), steps=steps,
        completeness_gap=gap, sequence=sequence, sample_id=sample_id)


def actual_base_scores(attribution: AttributionMap, onehot: np.ndarray) -> np.ndarray:
    """Project an [L, 4] map onto the observed base per position (N rows give 0)."""
    if attribution.scores.shape != onehot.shape:
        raise ValueError("attribution map and one-hot shapes differ")
    return (attribution.scores * onehot).sum(axis=1)


def _window_sums(track: np.ndarray, window: int) -> np.ndarray:
    return np.convolve(np.abs(track), np.ones(window), mode="valid")


def extract_seqlets(tracks: Sequence[np.ndarray], window: int,
                    null_tracks: Sequence[np.ndarray],
                    label: str = "") -> list[Seqlet]:
    """Windows whose |attribution| mass exceeds mean + 3 std of the null
    windows, de-overlapped greedily by descending mass."""
    if not tracks:
        raise ValueError("no attribution tracks given")
    if not null_tracks:
        raise ValueError("null tracks from shuffled sequences are required")
    if any(len(t) < window for t in tracks):
        raise ValueError("window exceeds track length")

    null_sums = np.concatenate([_window_sums(t, window) for t in null_tracks])
    threshold = float(null_sums.mean() + 3.0 * null_sums.std())

    seqlets: list[Seqlet] = []
    for index, track in enumerate(tracks):
        sums = _window_sums(track, window)
        candidates = np.flatnonzero(sums > threshold)
        kept: list[int] = []
        for start in candidates[np.argsort(-sums[candidates], kind="stable")]:
            if all(abs(start - other) >= window for other in kept):
                kept.append(int(start))
        for start in sorted(kept):
            seqlets.append(Seqlet(index, start, window,
                                  np.asarray(track[start:start + window]), label))
    return seqlets


def _revcomp_onehot(window: np.ndarray) -> np.ndarray:
    return window[::-1, ::-1]


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.reshape(-1).astype(np.float64)
    b = b.reshape(-1).astype(np.float64)
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 0.0  # zero-variance inputs carry no signal
    return float((a * b).sum() / denom)


def _best_alignment(seed: np.ndarray, window: np.ndarray,
                    max_shift: int) -> tuple[float, int, bool]:
    best = (-2.0, 0, False)
    for flipped, cand in ((False, window), (True, _revcomp_onehot(window))):
        for shift in range(-max_shift, max_shift + 1):
            lo = max(0, shift)
            hi = min(seed.shape[0], window.shape[0] + shift)
            if hi - lo < 2:
                continue
            corr = _pearson(seed[lo:hi], cand[lo - shift:hi - shift])
            if corr > best[0]:
                best = (corr, shift, flipped)
    return best


def cluster_and_build_pwm(seqlets: Sequence[Seqlet],
                          onehots: Sequence[np.ndarray],
                          correlation_cutoff: float = 0.7) -> list[Pwm]:
    """Greedy seeding by descending seqlet weight; members join the first
    cluster whose seed aligns (either strand, shifts up to half a window)
    above the correlation cutoff. Cluster PWMs average aligned one-hot
    rows weighted by |attribution|."""
    if not seqlets:
        return []
    windows = []
    for s in seqlets:
        window = np.asarray(onehots[s.sample_index][s.start:s.start + s.length],
                            dtype=np.float64)
        windows.append(window)

    order = sorted(range(len(seqlets)), key=lambda i: -seqlets[i].weight)
    width = seqlets[0].length
    max_shift = width // 2
    clusters: list[dict] = []
    for i in order:
        window, weight = windows[i], seqlets[i].weight
        placed = False
        for cluster in clusters:
            corr, shift, flipped = _best_alignment(cluster["seed"], window, max_shift)
            if corr > correlation_cutoff:
                cluster["members"].append((window, weight, shift, flipped))
                placed = True
                break
        if not placed:
            clusters.append({"seed": window,
                             "members": [(window, weight, 0, False)]})

    pwms = []
    for rank, cluster in enumerate(clusters):
        acc = np.zeros((width, 4))
        mass = np.zeros(width)
        for window, weight, shift, flipped in cluster["members"]:
            aligned = _revcomp_onehot(window) if flipped else window
            lo = max(0, shift)
            hi = min(width, width + shift)
            acc[lo:hi] += weight * aligned[lo - shift:hi - shift]
            mass[lo:hi] += weight
        matrix = np.full((width, 4), 0.25)
        covered = mass > 0
        matrix[covered] = acc[covered] / mass[covered, None]
        row_sums = matrix.sum(axis=1, keepdims=True)
        matrix = np.divide(matrix, row_sums, out=np.full_like(matrix, 0.25),
                           where=row_sums > 0)
        info = information_content(matrix)
        pwms.append(Pwm(matrix, info, len(cluster["members"]), name=f"cluster{rank}"))
    pwms.sort(key=lambda p: -p.members)
    return pwms


def information_content(matrix: np.ndarray) -> np.ndarray:
    """Per-row bits: 2 + sum_c p log2 p (0 log 0 = 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(matrix > 0, matrix * np.log2(matrix), 0.0)
    return np.clip(2.0 + plogp.sum(axis=1), 0.0, 2.0)


def pwm_from_consensus(consensus: str) -> Pwm:
    matrix = one_hot(consensus).astype(np.float64)
    return Pwm(matrix, information_content(matrix), 1, name=consensus)


def pwm_similarity(a: Pwm, b: Pwm) -> float:
    """Max Pearson correlation over strands and full-containment shifts of
    the shorter matrix inside the longer one."""
    short, long_ = (a.matrix, b.matrix) if a.width <= b.width else (b.matrix, a.matrix)
    best = -1.0
    for cand in (short, _revcomp_onehot(short)):
        for offset in range(long_.shape[0] - cand.shape[0] + 1):
            corr = _pearson(long_[offset:offset + cand.shape[0]], cand)
            best = max(best, corr)
    return best


# ---------------------------------------------------------------------------
# text formats

def write_attribution_maps(maps: Iterable[AttributionMap], path,
                           header_lines: Iterable[str] = ()) -> None:
    """One block per map: '>sample_id label completeness_gap' then L rows of
    4 tab-separated reals."""
    with open(path, "w", encoding="ascii") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for m in maps:
            fh.write(f">{m.sample_id or 'sample'} {m.label} {m.completeness_gap:.6g}\n")
            for row in m.scores:
                fh.write("\t".join(f"{v:.6g}" for v in row) + "\n")


def read_attribution_maps(path) -> list[AttributionMap]:
    maps: list[AttributionMap] = []
    rows: list[list[float]] = []
    head: Optional[tuple[str, str, float]] = None

    def flush():
        if head is None:
            return
        sample_id, label, gap = head
        maps.append(AttributionMap(label=label, scores=np.array(rows),
                                   baseline_count=0, steps=0,
                                   completeness_gap=gap, sample_id=sample_id))

    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            if line.startswith(">"):
                flush()
                parts = line[1:].split()
                if len(parts) != 3:
                    raise DataError(f"line {lineno}: malformed block header")
                head = (parts[0], parts[1], float(parts[2]))
                rows = []
            else:
                if head is None:
                    raise DataError(f"line {lineno}: scores before a header")
                values = line.split("\t")
                if len(values) != 4:
                    raise DataError(f"line {lineno}: expected 4 columns")
                rows.append([float(v) for v in values])
    flush()
    return maps


def write_pwms(pwms: Iterable[Pwm], path, header_lines: Iterable[str] = ()) -> None:
    """Minimal MEME-like text: MOTIF name, w= width, probability rows, with
    the information content appended as comments."""
    with open(path, "w", encoding="ascii") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("ALPHABET= ACGT\n\n")
        for pwm in pwms:
            fh.write(f"MOTIF {pwm.name or 'motif'}\n")
            fh.write(f"w= {pwm.width}\n")
            for row in pwm.matrix:
                fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")
            fh.write("# members= " + str(pwm.members) + "\n")
            fh.write("# info_bits= " +
                     " ".join(f"{v:.4f}" for v in pwm.information) + "\n\n")
