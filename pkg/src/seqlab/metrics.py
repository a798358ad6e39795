"""Frame accuracy, segment edit distance and paired permutation tests."""

import math
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numeric import Rng

Segment = namedtuple("Segment", ["label", "start", "end"])

EXACT_LIMIT = 20
MC_RESAMPLES = 100_000


def _as_mask(mask, n):
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ContractError(f"mask length {mask.shape} does not match {n} frames")
    return mask


def frame_accuracy(pred, truth, mask=None):
    """Percentage of unmasked frames whose predicted label is correct."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction length {pred.shape} != truth length {truth.shape}")
    mask = _as_mask(mask, len(truth))
    n = int(mask.sum())
    if n == 0:
        raise ContractError("frame_accuracy needs at least one unmasked frame")
    return 100.0 * int((pred[mask] == truth[mask]).sum()) / n


def to_segments(labels, mask=None):
    """Run-length encode the unmasked frames.

    A masked frame closes the current segment, so equal labels on either
    side of a gap become two segments.
    """
    labels = list(labels)
    mask = _as_mask(mask, len(labels))
    segments = []
    start = None
    for t, (lab, keep) in enumerate(zip(labels, mask)):
        if not keep:
            if start is not None:
                segments.append(Segment(labels[start], start, t))
                start = None
            continue
        if start is None:
            start = t
        elif lab != labels[start]:
            segments.append(Segment(labels[start], start, t))
            start = t
    if start is not None:
        segments.append(Segment(labels[start], start, len(labels)))
    return segments


def segment_labels(segments):
    return [s.label for s in segments]


def edit_distance(a, b):
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        left = i
        cur = [i]
        for j, y in enumerate(b):
            up = prev[j + 1]
            cost = prev[j] if x == y else prev[j] + 1
            left = min(up + 1, left + 1, cost)
            cur.append(left)
        prev = cur
    return prev[-1]


def normalized_edit_distance(pred, truth, normalizer):
    """100 * edit distance between segment label lists / normalizer."""
    if normalizer < 1:
        raise ContractError(f"normalizer must be >= 1, got {normalizer}")
    return 100.0 * edit_distance(_labels_of(pred), _labels_of(truth)) / normalizer


def _labels_of(segs):
    return [s.label if isinstance(s, Segment) else s for s in segs]


def dataset_normalizer(truth_segments):
    """Largest ground-truth segment count over a dataset's sequences."""
    if len(truth_segments) == 0:
        raise ContractError("dataset_normalizer needs at least one sequence")
    return max(len(s) for s in truth_segments)


def permutation_test(a, b, two_sided=True, resamples=MC_RESAMPLES, seed=0, exact_limit=EXACT_LIMIT):
    """Paired sign-flip permutation test on the mean difference ``a - b``.

    Exact enumeration of all 2**n sign patterns when n <= ``exact_limit``,
    otherwise a seeded Monte-Carlo estimate. Returns ``(p_value, mode)`` where mode is
    ``"exact"`` or ``"monte-carlo"``.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or len(d) == 0 or len(a) != len(b):
        raise ContractError("permutation_test needs two equal-length, nonempty score lists")
    n = len(d)
    observed = d.sum()
    # sums of differences are compared, which orders patterns exactly as their means
    tol = 1e-9 * max(1.0, float(np.abs(d).sum()))
    if n <= exact_limit:
        mode = "exact"
        total = 1 << n
        hits = 0
        chunk = 1 << 16
        bits = np.arange(n, dtype=np.int64)
        for lo in range(0, total, chunk):
            codes = np.arange(lo, min(total, lo + chunk), dtype=np.int64)
            signs = 1.0 - 2.0 * ((codes[:, None] >> bits) & 1)
            hits += _count_extreme(signs @ d, observed, two_sided, tol)
        return hits / total, mode
    rng = Rng(seed)
    hits = 0
    done = 0
    while done < resamples:
        m = min(10_000, resamples - done)
        signs = np.where(rng.uniform((m, n)) < 0.5, -1.0, 1.0)
        hits += _count_extreme(signs @ d, observed, two_sided, tol)
        done += m
    return hits / resamples, "monte-carlo"


def _count_extreme(sums, observed, two_sided, tol):
    if two_sided:
        return int((np.abs(sums) >= abs(observed) - tol).sum())
    return int((sums >= observed - tol).sum())


@dataclass
class RunResult:
    run: int
    held_out_user: str
    accuracy: float = math.nan
    edit: float = math.nan
    failed: bool = False
    error: str = ""


@dataclass
class EvalReport:
    """Per-run accuracy and normalized edit distance (both in percent)."""

    name: str
    normalizer: int
    runs: list = field(default_factory=list)
    significance: dict = field(default_factory=dict)

    def _ok(self, attr):
        return np.array([getattr(r, attr) for r in self.runs if not r.failed])

    def mean_std(self, attr):
        vals = self._ok(attr)
        if len(vals) == 0:
            return math.nan, math.nan
        return float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0

    @property
    def failed_runs(self):
        return [r for r in self.runs if r.failed]

    def to_csv(self):
        lines = ["run,held_out_user,accuracy_pct,edit_pct"]
        for r in self.runs:
            acc = "" if r.failed else repr(r.accuracy)
            ed = "" if r.failed else repr(r.edit)
            lines.append(f"{r.run},{r.held_out_user},{acc},{ed}")
        return "\n".join(lines) + "\n"

    def to_text(self):
        acc_m, acc_s = self.mean_std("accuracy")
        ed_m, ed_s = self.mean_std("edit")
        lines = [
            f"report = {self.name}",
            f"normalizer = {self.normalizer}",
            f"runs = {len(self.runs)}",
            f"failed_runs = {len(self.failed_runs)}",
        ]
        for r in self.runs:
            if r.failed:
                lines.append(f"run.{r.run}.{r.held_out_user} = FAILED ({r.error})")
            else:
                lines.append(f"run.{r.run}.{r.held_out_user} = accuracy {r.accuracy:.2f} edit {r.edit:.2f}")
        lines.append(f"accuracy_pct = {acc_m:.2f} +- {acc_s:.2f}")
        lines.append(f"edit_pct = {ed_m:.2f} +- {ed_s:.2f}")
        for key, value in self.significance.items():
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def read_report_csv(path):
    """Parse a report CSV back into ``{held_out_user: (accuracy, edit)}``."""
    rows = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "run,held_out_user,accuracy_pct,edit_pct":
            raise ContractError(f"{path}: unexpected header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            _, user, acc, ed = line.split(",")
            rows[user] = (float(acc) if acc else math.nan, float(ed) if ed else math.nan)
    return rows
