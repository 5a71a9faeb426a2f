"""Maximum-likelihood fit of the M3 omega mixture on a fixed tree.

Site likelihoods come from Felsenstein pruning, one pass per omega class;
the mixture likelihood of a site is the probability-weighted sum over
classes.  Branch lengths are held at their input values throughout.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize, minimize_scalar
from scipy.special import logsumexp

from .codon_ctmc import M3Params, build_model, f1x4_frequencies, mixture_models
from .evolver import DEFAULT_OMEGAS, _edge_order
from .ls_tree import Phylogeny
from .seqio import MISSING, CodonAlignment, variable_sites

log = logging.getLogger(__name__)

KAPPA_BOUNDS = (0.01, 100.0)
OMEGA_BOUNDS = (0.0, 20.0)
DEFAULT_START = dict(kappa=2.0, omegas=DEFAULT_OMEGAS, probs=(1 / 3, 1 / 3, 1 / 3))


class TipMismatch(ValueError):
    pass


class NonFinite(FloatingPointError):
    pass


class DegenerateFit(UserWarning):
    pass


@dataclass
class TreeLikelihoodWorkspace:
    """Alignment compressed to unique site patterns, ordered to match the tree."""

    tree: Phylogeny
    aln: CodonAlignment
    patterns: np.ndarray = field(init=False)  # (n_tips, n_patterns) in tree tip order
    weights: np.ndarray = field(init=False)
    root: int = field(init=False)
    postorder: list = field(init=False)

    def __post_init__(self):
        if sorted(self.tree.names) != sorted(self.aln.names):
            missing = set(self.tree.names) ^ set(self.aln.names)
            raise TipMismatch(f"tree and alignment taxa differ: {sorted(missing)}")
        rows = [self.aln.names.index(nm) for nm in self.tree.names]
        cols = self.aln.codons[rows]
        pats, counts = np.unique(cols, axis=1, return_counts=True)
        self.patterns = pats.astype(np.intp)
        self.weights = counts.astype(float)
        self.root, order = _edge_order(self.tree)
        self.postorder = order[::-1]


def _prune_scaled(ws, pmats, pi):
    n_tips = ws.tree.n_tips
    S = ws.patterns.shape[1]
    M = pi.size
    partial = {}
    logscale = np.zeros(S)
    pending = {}
    # number of children each internal node still waits for
    for parent, _, _ in ws.postorder:
        pending[parent] = pending.get(parent, 0) + 1
    for parent, child, e in ws.postorder:
        P = pmats[e]
        if child < n_tips:
            st = ws.patterns[child]
            contrib = np.ones((S, M))
            obs = st != MISSING
            contrib[obs] = P[:, st[obs]].T
        else:
            contrib = partial.pop(child) @ P.T
        partial[parent] = partial[parent] * contrib if parent in partial else contrib
        pending[parent] -= 1
        if pending[parent] == 0:
            m = partial[parent].max(axis=1)
            m = np.where(m > 0, m, 1.0)
            partial[parent] /= m[:, None]
            logscale += np.log(m)
    root = partial[ws.root]
    if ws.root < n_tips:
        # two-tip tree: the root is itself an observed tip
        st = ws.patterns[ws.root]
        obs = np.flatnonzero(st != MISSING)
        keep = np.zeros_like(root)
        keep[obs, st[obs]] = root[obs, st[obs]]
        root = np.where((st == MISSING)[:, None], root, keep)
    site = np.maximum(root @ pi, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(site) + logscale


def _class_pmats(Q, lengths, scale):
    # expm keeps small transition probabilities accurate in relative terms,
    # which the spectral route does not
    return [np.maximum(expm(Q * (b / scale)), 0.0) for b in lengths]


def site_log_likelihoods(ws: TreeLikelihoodWorkspace, params: M3Params) -> np.ndarray:
    """Per-pattern mixture log-likelihoods, shape ``(n_patterns,)``."""
    pi = np.asarray(params.pi)
    per_class = []
    for model, p in zip(mixture_models(params, ws.aln.code), params.probs):
        pm = _class_pmats(np.asarray(model.Q), ws.tree.lengths, 1.0)
        with np.errstate(divide="ignore"):
            per_class.append(math.log(p) + _prune_scaled(ws, pm, pi) if p > 0 else
                             np.full(ws.weights.size, -np.inf))
    return logsumexp(np.stack(per_class), axis=0)


def log_likelihood(ws: TreeLikelihoodWorkspace, params: M3Params) -> float:
    """Total mixture log-likelihood of the alignment on the workspace tree."""
    return float(ws.weights @ site_log_likelihoods(ws, params))


class _Evaluator:
    """Log-likelihood as a function of (kappa, omegas, probs) with rate-matrix caching."""

    def __init__(self, ws, pi):
        self.ws = ws
        self.pi = pi
        self._qs = {}
        self._site = {}

    def _rates(self, kappa, omega):
        key = (kappa, omega)
        if key not in self._qs:
            m = build_model(kappa, omega, self.pi, self.ws.aln.code, rate_scale=1.0)
            self._qs[key] = (np.asarray(m.Q), m.mean_rate)
            if len(self._qs) > 64:
                self._qs.pop(next(iter(self._qs)))
        return self._qs[key]

    def _class_site(self, kappa, omega, scale):
        key = (kappa, omega, scale)
        if key not in self._site:
            Q, _ = self._rates(kappa, omega)
            pm = _class_pmats(Q, self.ws.tree.lengths, scale)
            self._site[key] = _prune_scaled(self.ws, pm, self.pi)
            if len(self._site) > 32:
                self._site.pop(next(iter(self._site)))
        return self._site[key]

    def __call__(self, kappa, omegas, probs):
        scale = sum(p * self._rates(kappa, w)[1] for w, p in zip(omegas, probs))
        terms = []
        for w, p in zip(omegas, probs):
            if p <= 0:
                continue
            terms.append(math.log(p) + self._class_site(kappa, w, scale))
        val = float(self.ws.weights @ logsumexp(np.stack(terms), axis=0))
        if math.isnan(val):
            raise NonFinite(f"log-likelihood is {val} at kappa={kappa}, omegas={omegas}, probs={probs}")
        return val


def _line_max(f, lo, hi, x0, f0, xatol):
    """Bounded scalar maximization; keeps the incumbent unless strictly beaten."""
    res = minimize_scalar(lambda x: -f(x), bounds=(lo, hi), method="bounded",
                          options={"xatol": xatol})
    if -res.fun > f0:
        return float(res.x), float(-res.fun)
    return x0, f0


def _reweight(probs, c, x):
    probs = list(probs)
    rest = 1.0 - probs[c]
    if rest <= 0:
        others = [(1.0 - x) / (len(probs) - 1)] * len(probs)
    else:
        others = [q * (1.0 - x) / rest for q in probs]
    others[c] = x
    total = sum(others)
    return tuple(q / total for q in others)


def _stick(a, b):
    return (a, (1.0 - a) * b, (1.0 - a) * (1.0 - b))


def _unstick(probs):
    a = probs[0]
    b = probs[1] / (1.0 - a) if a < 1.0 else 0.5
    return a, min(max(b, 0.0), 1.0)


def _quasi_newton(ev, kappa, omegas, probs, cur):
    """Joint bounded L-BFGS-B ascent; returns the better of its result and the start."""
    def unpack(x):
        return math.exp(x[0]), [float(v) for v in x[1:4]], _stick(x[4], x[5])

    def neg(x):
        val = ev(*unpack(x))
        return -val if math.isfinite(val) else 1e12

    x0 = np.array([math.log(kappa), *omegas, *_unstick(probs)])
    bounds = [tuple(np.log(KAPPA_BOUNDS))] + [OMEGA_BOUNDS] * 3 + [(0.0, 1.0)] * 2
    res = minimize(neg, x0, method="L-BFGS-B", bounds=bounds,
                   options={"ftol": 1e-13, "gtol": 1e-7, "maxiter": 1000})
    if -res.fun > cur:
        k, w, p = unpack(res.x)
        return k, w, p, float(-res.fun)
    return kappa, list(omegas), tuple(probs), cur


def fit_m3(
    aln: CodonAlignment,
    tree: Phylogeny,
    pi=None,
    start: M3Params | None = None,
    tol: float = 1e-6,
    max_sweeps: int = 200,
    trace: list | None = None,
) -> M3Params:
    """ML estimate of kappa, omegas and mixture weights.

    A joint bounded quasi-Newton ascent moves quickly along the ridges where
    omegas and weights trade off.  Coordinate-ascent sweeps then follow:
    each line-searches kappa on a log scale, each omega within
    ``OMEGA_BOUNDS`` and each weight along the simplex, accepting a move
    only if it raises the likelihood.  Iteration stops once a sweep gains
    less than ``tol`` log-likelihood units.

    Parameters
    ----------
    pi : array_like, optional
        Codon frequencies; F1x4 estimates from ``aln`` by default.
    trace : list, optional
        Receives the starting log-likelihood, the value after the
        quasi-Newton stage and the value after every sweep.

    Returns
    -------
    M3Params
        In canonical (ascending omega) order, with ``log_likelihood`` set.
        An alignment without variable sites returns the default start values
        flagged ``degenerate=True``.
    """
    pi = f1x4_frequencies(aln) if pi is None else np.asarray(pi, dtype=float)
    ws = TreeLikelihoodWorkspace(tree, aln)
    if start is None:
        kappa, omegas, probs = DEFAULT_START["kappa"], DEFAULT_START["omegas"], DEFAULT_START["probs"]
    else:
        kappa, omegas, probs = start.kappa, start.omegas, start.probs
    if not variable_sites(aln) or tree.total_length() == 0:
        warnings.warn("no substitutions to fit; returning default M3 parameters",
                      DegenerateFit, stacklevel=2)
        p = M3Params(kappa, omegas, probs, pi, degenerate=True)
        return M3Params(p.kappa, p.omegas, p.probs, pi, log_likelihood(ws, p), degenerate=True)
    ev = _Evaluator(ws, pi)
    omegas, probs = list(omegas), tuple(probs)
    cur = ev(kappa, omegas, probs)
    if not math.isfinite(cur):
        raise NonFinite(f"log-likelihood is {cur} at the starting point kappa={kappa}, "
                        f"omegas={omegas}, probs={probs}")
    if trace is not None:
        trace.append(cur)
    kappa, omegas, probs, cur = _quasi_newton(ev, kappa, omegas, probs, cur)
    if trace is not None:
        trace.append(cur)
    for sweep in range(max_sweeps):
        before = cur
        lk, cur = _line_max(
            lambda x: ev(math.exp(x), omegas, probs), *np.log(KAPPA_BOUNDS),
            math.log(kappa), cur, 1e-5)
        kappa = math.exp(lk)
        for c in range(len(omegas)):
            def f_omega(x, c=c):
                trial = list(omegas)
                trial[c] = x
                return ev(kappa, trial, probs)
            omegas[c], cur = _line_max(f_omega, *OMEGA_BOUNDS, omegas[c], cur, 1e-5)
        for c in range(len(probs)):
            x, cur = _line_max(lambda x, c=c: ev(kappa, omegas, _reweight(probs, c, x)),
                               0.0, 1.0, probs[c], cur, 1e-6)
            if x != probs[c]:
                probs = _reweight(probs, c, x)
        if trace is not None:
            trace.append(cur)
        log.debug("sweep %d: logL=%.6f kappa=%.4f omegas=%s probs=%s", sweep, cur, kappa,
                  omegas, probs)
        if cur - before < tol:
            break
    return M3Params(kappa, tuple(omegas), probs, pi, cur)
