"""Sliding-window Dss ("difference in sum of squares") scans.

For each window the two halves get their own labeled distance matrices,
each rescaled so its mean equals the whole-alignment mean distance.  The
forward statistic fits a least-squares tree to the first half (SSa) and
refits only branch lengths on the second half under that topology (SSb).
The backward statistic swaps the halves.  A window's value is the larger
of the two and the scan statistic is the maximum over windows.

By default a window scores the misfit ``SSb - SSa``, which grows when the
halves support different trees.  ``orientation="literal"`` scores
``SSa - SSb`` instead; under that sign incongruent halves give large
negative values, so its maximum mostly tracks noise.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .codon_ctmc import CodonModel, LabelSet, build_model, f1x4_frequencies
from .ls_tree import (
    EXHAUSTIVE_MAX_TAXA,
    _all_topologies,
    ls_tree_search,
    ols_branch_lengths,
    ols_ss_batch,
)
from .pairwise_dist import DistanceMatrix, PairwiseEngine, distance_matrices
from .seqio import CodonAlignment

DEGENERATE_EPS = 1e-9
ORIENTATIONS = ("misfit", "literal")


class WindowTooLong(ValueError):
    pass


class DegenerateHalf(ValueError):
    pass


class AllWindowsDegenerate(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    """Window and step sizes in codons; the window must split into equal halves."""

    window_codons: int
    step_codons: int

    def __post_init__(self):
        if self.window_codons <= 0 or self.window_codons % 2:
            raise ValueError(f"window must be a positive even codon count, got {self.window_codons}")
        if self.step_codons <= 0:
            raise ValueError(f"step must be positive, got {self.step_codons}")

    @classmethod
    def from_nucleotides(cls, window_nt: int, step_nt: int) -> WindowSpec:
        for what, v in (("window", window_nt), ("step", step_nt)):
            if v % 3:
                raise ValueError(f"{what} of {v} nucleotides is not divisible by 3")
        return cls(window_nt // 3, step_nt // 3)

    @property
    def half(self) -> int:
        return self.window_codons // 2


def enumerate_windows(n_codons: int, spec: WindowSpec) -> list:
    """``(start, end)`` codon intervals at starts 0, step, 2*step, ..."""
    if spec.window_codons > n_codons:
        raise WindowTooLong(
            f"window of {spec.window_codons} codons exceeds alignment length {n_codons}"
        )
    count = (n_codons - spec.window_codons) // spec.step_codons + 1
    return [(i * spec.step_codons, i * spec.step_codons + spec.window_codons) for i in range(count)]


def standardize(half: DistanceMatrix, global_mean: float) -> DistanceMatrix:
    """Rescale a half-window matrix so its mean equals ``global_mean``."""
    if not global_mean > 0:
        raise ValueError("global mean distance must be positive")
    w = half.mean
    if w <= DEGENERATE_EPS:
        raise DegenerateHalf(f"half-window mean distance {w:.3g} carries no signal")
    return half.scaled(global_mean / w)


def _sign(orientation):
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {orientation!r}")
    return 1.0 if orientation == "misfit" else -1.0


def window_dss(first: DistanceMatrix, second: DistanceMatrix, global_mean: float,
               orientation: str = "misfit") -> float:
    """Forward Dss for one window.

    SSa is the least-squares fit of the standardized first half and SSb the
    fit of the standardized second half on SSa's topology.  Returns
    ``SSb - SSa`` (or ``SSa - SSb`` for ``orientation="literal"``).
    """
    sign = _sign(orientation)
    d1 = standardize(first, global_mean)
    d2 = standardize(second, global_mean)
    fit = ls_tree_search(d1)
    return sign * (ols_branch_lengths(fit.tree.topology, d2).ss - fit.ss)


@dataclass(frozen=True)
class WindowResult:
    start: int
    mid: int
    end: int
    dss_forward: float = math.nan
    dss_backward: float = math.nan
    skipped: bool = False

    @property
    def dss(self) -> float:
        return max(self.dss_forward, self.dss_backward) if not self.skipped else math.nan


@dataclass(frozen=True)
class DssLandscape:
    label: LabelSet
    windows: tuple
    global_mean: float
    n_codons: int = 0

    @property
    def retained(self) -> list:
        return [w for w in self.windows if not w.skipped]

    @property
    def skipped(self) -> list:
        return [w for w in self.windows if w.skipped]

    @property
    def best_window(self) -> WindowResult:
        kept = self.retained
        if not kept:
            raise AllWindowsDegenerate(f"no {self.label.value} window has signal in both halves")
        return max(kept, key=lambda w: w.dss)

    @property
    def dss_max(self) -> float:
        return self.best_window.dss

    def to_csv(self, threshold: float | None = None) -> str:
        """CSV with 1-based codon coordinates; ``mid`` is the first codon of the second half."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["start", "mid", "end", "dss_forward", "dss_backward", "dss", "skipped"]
        if threshold is not None:
            header.append("threshold_95")
        w.writerow(header)
        for r in self.windows:
            row = [r.start + 1, r.mid + 1, r.end, _num(r.dss_forward), _num(r.dss_backward),
                   _num(r.dss), int(r.skipped)]
            if threshold is not None:
                row.append(_num(threshold))
            w.writerow(row)
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"label": self.label.value, "n_windows": len(self.windows),
               "n_skipped": len(self.skipped), "global_mean": self.global_mean}
        if self.retained:
            b = self.best_window
            out.update(dss_max=b.dss, window={"start": b.start + 1, "mid": b.mid + 1, "end": b.end})
        else:
            out.update(dss_max=None, window=None)
        return out


def _num(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def scan_model(aln: CodonAlignment, kappa: float, omega: float) -> CodonModel:
    """Codon model for scanning: fixed kappa/omega with F1x4 frequencies of ``aln``."""
    return build_model(kappa, omega, f1x4_frequencies(aln), aln.code)


@dataclass
class _HalfTable:
    intervals: list
    vecs: dict = field(default_factory=dict)  # label -> (n_halves, n_pairs)


def _half_distances(aln, spec, labels, model, method):
    wins = enumerate_windows(aln.n_codons, spec)
    h = spec.half
    intervals = sorted({(s, s + h) for s, _ in wins} | {(s + h, e) for s, e in wins})
    n = aln.n_taxa
    ks, ls = np.triu_indices(n, 1)
    P = ks.size
    K = len(intervals)
    pk = np.tile(ks, K)
    pl = np.tile(ls, K)
    starts = np.repeat([u for u, _ in intervals], P)
    ends = np.repeat([v for _, v in intervals], P)
    eng = PairwiseEngine(model, aln.codons)
    t = eng.times(pk, pl, starts, ends)
    table = _HalfTable(intervals)
    if method == "plugin":
        from .codon_ctmc import labeled_flux

        for lab in labels:
            f = 1.0 if lab is LabelSet.ALL else labeled_flux(model, lab)
            table.vecs[lab] = (t * f).reshape(K, P)
    else:
        counts = eng.counts(pk, pl, starts, ends, t, labels)
        for lab in labels:
            table.vecs[lab] = counts[lab].reshape(K, P)
    return wins, table


def _landscape(label, wins, half, intervals, vecs, global_mean, n, n_codons, sign=1.0):
    index = {iv: i for i, iv in enumerate(intervals)}
    means = vecs.mean(axis=1)
    ok = means > DEGENERATE_EPS
    std = np.where(ok[:, None], vecs * (global_mean / np.where(ok, means, 1.0))[:, None], 0.0)

    if n <= EXHAUSTIVE_MAX_TAXA:
        topos = _all_topologies(n)
        S = np.stack([ols_ss_batch(tp, std) for tp in topos], axis=1)  # halves x topologies
        best = np.argmin(S, axis=1)

        def fit(i):
            return best[i], S[i, best[i]]

        def refit(j, topo_idx):
            return S[j, topo_idx]
    else:
        cache = {}

        def fit(i):
            if i not in cache:
                names = tuple(range(n))
                D = np.zeros((n, n))
                D[np.triu_indices(n, 1)] = std[i]
                D = D + D.T
                r = ls_tree_search(DistanceMatrix(D, [str(x) for x in names]))
                cache[i] = (r.tree.topology, r.ss, D)
            return cache[i][0], cache[i][1]

        def refit(j, topo):
            fit(j)
            D = cache[j][2]
            return ols_branch_lengths(topo, D).ss

    out = []
    for s, e in wins:
        i1, i2 = index[(s, s + half)], index[(s + half, e)]
        if not (ok[i1] and ok[i2]):
            out.append(WindowResult(s, s + half, e, skipped=True))
            continue
        t1, ssa_f = fit(i1)
        t2, ssa_b = fit(i2)
        fwd = float(sign * (refit(i2, t1) - ssa_f))
        bwd = float(sign * (refit(i1, t2) - ssa_b))
        out.append(WindowResult(s, s + half, e, fwd, bwd))
    return DssLandscape(label, tuple(out), float(global_mean), n_codons)


def scan_labels(
    aln: CodonAlignment,
    spec: WindowSpec,
    labels,
    model: CodonModel,
    method: str = "counting",
    strict: bool = True,
    orientation: str = "misfit",
) -> dict:
    """Scan one alignment for several label sets, sharing all time estimates.

    Parameters
    ----------
    orientation : {"misfit", "literal"}
        Sign convention of the window statistic, see the module notes.
    strict : bool
        If false, a label set without any usable window maps to ``None``
        instead of raising.

    Raises
    ------
    AllWindowsDegenerate
        If, for any requested label set, no window has signal in both halves
        (only when ``strict``).
    """
    labels = [LabelSet.parse(x) for x in labels]
    sign = _sign(orientation)
    aln.require_tree_size()
    whole = distance_matrices(aln, labels, model, method=method)
    wins, table = _half_distances(aln, spec, labels, model, method)
    out = {}
    for lab in labels:
        try:
            dbar = whole[lab].mean
            if dbar <= DEGENERATE_EPS:
                raise AllWindowsDegenerate(f"alignment has no {lab.value} divergence")
            land = _landscape(lab, wins, spec.half, table.intervals, table.vecs[lab], dbar,
                              aln.n_taxa, aln.n_codons, sign)
            if not land.retained:
                raise AllWindowsDegenerate(f"no {lab.value} window has signal in both halves")
        except AllWindowsDegenerate:
            if strict:
                raise
            land = None
        out[lab] = land
    return out


def scan(aln: CodonAlignment, spec: WindowSpec, labels, model: CodonModel,
         method: str = "counting", orientation: str = "misfit") -> DssLandscape:
    """Dss landscape for a single label set."""
    labels = LabelSet.parse(labels)
    return scan_labels(aln, spec, [labels], model, method, orientation=orientation)[labels]


def landscapes_json(lands: dict, **extra) -> str:
    payload = {lab.value: land.summary() for lab, land in lands.items()}
    payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True)
