"""Parametric bootstrap for the maximum Dss statistic.

The null hypothesis is a single tree for the whole alignment.  The null
model is the least-squares tree of the whole-alignment codon distances
together with M3 mixture parameters fitted on that tree.  Replicate
alignments simulated from it are scanned exactly like the observed data,
and only the maximum Dss of each replicate is kept.
"""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .codon_ctmc import LabelSet, M3Params, build_model, f1x4_frequencies
from .dss_engine import WindowSpec, scan_labels, scan_model
from .evolver import RngStream, simulate_alignment
from .ls_tree import Phylogeny, ls_tree_search
from .m3_fit import DEFAULT_START, DegenerateFit, fit_m3
from .pairwise_dist import SaturatedDistance, distance_matrix
from .seqio import CodonAlignment

log = logging.getLogger(__name__)

ALPHA = 0.05


def p_value(observed: float, null_samples) -> float:
    """Fraction of null samples at least as large as ``observed`` (ties count)."""
    null = np.asarray(null_samples, dtype=float)
    if null.size == 0:
        raise ValueError("no null samples")
    return int(np.count_nonzero(null >= observed)) / null.size


def threshold_95(null_samples) -> float:
    """Nearest-rank 95th percentile: the ceil(0.95 B)-th smallest sample."""
    null = np.sort(np.asarray(null_samples, dtype=float))
    if null.size == 0:
        raise ValueError("no null samples")
    return float(null[math.ceil(0.95 * null.size) - 1])


def _distance_tree(aln, kappa, omega, pi):
    model = build_model(kappa, omega, pi, aln.code)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturatedDistance)
        d = distance_matrix(aln, LabelSet.ALL, model)
    return ls_tree_search(d)


def fit_null(aln: CodonAlignment, refine: bool = True) -> tuple:
    """Null tree and M3 parameters for ``aln``.

    Codon distances need a kappa and an omega before any have been
    estimated, so the first tree uses the optimizer's starting values.
    With ``refine`` the distances, the tree and the mixture are then
    recomputed once at the fitted kappa and mean omega.

    Returns
    -------
    tree : Phylogeny
        Least-squares tree, tips in alignment order.
    params : M3Params
        Fitted mixture with F1x4 codon frequencies of ``aln``.
    """
    aln.require_tree_size()
    pi = f1x4_frequencies(aln)
    start = M3Params(DEFAULT_START["kappa"], DEFAULT_START["omegas"], DEFAULT_START["probs"], pi)
    fit = _distance_tree(aln, start.kappa, start.mean_omega, pi)
    if fit.tree.total_length() == 0:
        warnings.warn("sequences are identical; null model is degenerate", DegenerateFit,
                      stacklevel=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateFit)
        params = fit_m3(aln, fit.tree, pi)
    if refine and not params.degenerate:
        fit = _distance_tree(aln, params.kappa, params.mean_omega, pi)
        params = fit_m3(aln, fit.tree, pi, start=params)
    log.info("null fit: ss=%.4g kappa=%.4f omegas=%s probs=%s", fit.ss, params.kappa,
             params.omegas, params.probs)
    return fit.tree, params


@dataclass(frozen=True)
class BootstrapResult:
    observed: dict  # LabelSet -> observed dss_max
    null_samples: dict  # LabelSet -> (B,) array, -inf for degenerate replicates
    p_values: dict
    threshold_95: dict
    B: int
    seed: int
    null_tree: Phylogeny
    null_params: M3Params
    degenerate: dict  # LabelSet -> count of replicates without a usable window
    landscapes: dict | None = None  # observed DssLandscape per label set

    @property
    def labels(self) -> list:
        return list(self.observed)

    def significant(self, label, alpha: float = ALPHA) -> bool:
        return self.p_values[LabelSet.parse(label)] < alpha

    def to_dict(self) -> dict:
        def num(x):
            return float(x) if math.isfinite(x) else None

        out = {"B": self.B, "seed": self.seed, "null_tree": self.null_tree.to_newick(),
               "null_params": self.null_params.to_dict(), "labels": {}}
        for lab in self.observed:
            out["labels"][lab.value] = {
                "observed": float(self.observed[lab]),
                "p_value": float(self.p_values[lab]),
                "threshold_95": num(self.threshold_95[lab]),
                "degenerate_replicates": int(self.degenerate[lab]),
                "null_samples": [num(x) for x in self.null_samples[lab]],
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _replicate(job):
    tree, params, n_codons, spec, labels, seed, index, orientation = job
    rep = simulate_alignment(tree, n_codons, params, RngStream(seed, (index,)))
    model = scan_model(rep, params.kappa, params.mean_omega)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturatedDistance)
        lands = scan_labels(rep, spec, labels, model, strict=False, orientation=orientation)
    return [(-math.inf if lands[lab] is None else lands[lab].dss_max) for lab in labels]


def null_distribution(tree, params, n_codons, spec, labels, B, seed, threads=1,
                      orientation="misfit"):
    """``(B, n_labels)`` array of null dss_max values, row ``i`` from substream ``i``."""
    jobs = [(tree, params, n_codons, spec, labels, seed, i, orientation) for i in range(B)]
    if threads <= 1 or B <= 1:
        rows = [_replicate(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(threads, B, os.cpu_count() or 1)) as ex:
            rows = list(ex.map(_replicate, jobs, chunksize=max(1, B // (4 * threads))))
    return np.array(rows, dtype=float).reshape(B, len(labels))


def bootstrap(
    aln: CodonAlignment,
    spec: WindowSpec,
    labels=(LabelSet.ALL, LabelSet.SYN, LabelSet.NONSYN),
    B: int = 500,
    seed: int = 0,
    threads: int = 1,
    null: tuple | None = None,
    orientation: str = "misfit",
) -> BootstrapResult:
    """Observed dss_max per label set with bootstrap p-values.

    Parameters
    ----------
    null : (Phylogeny, M3Params), optional
        Precomputed :func:`fit_null` output.
    threads : int
        Worker processes for the replicates.  Results do not depend on it.
    orientation : {"misfit", "literal"}
        Window statistic sign, passed to :func:`scan_labels`.

    Raises
    ------
    AllWindowsDegenerate
        If the observed alignment has no usable window for some label set.
        Degenerate null replicates are tallied instead and score ``-inf``.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    labels = [LabelSet.parse(x) for x in labels]
    tree, params = fit_null(aln) if null is None else null
    model = scan_model(aln, params.kappa, params.mean_omega)
    lands = scan_labels(aln, spec, labels, model, orientation=orientation)
    observed = {lab: lands[lab].dss_max for lab in labels}
    samples = null_distribution(tree, params, aln.n_codons, spec, labels, B, seed, threads,
                                orientation)
    null, pv, thr, deg = {}, {}, {}, {}
    for j, lab in enumerate(labels):
        col = samples[:, j]
        null[lab] = col
        pv[lab] = p_value(observed[lab], col)
        thr[lab] = threshold_95(col)
        deg[lab] = int(np.count_nonzero(np.isneginf(col)))
    return BootstrapResult(observed, null, pv, thr, B, seed, tree, params, deg, lands)
