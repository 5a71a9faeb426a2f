"""GY94-style codon substitution models over the sense codons.

Rates follow the target-frequency form

    q_ij = pi_j * kappa^[transition] * omega^[nonsynonymous]

for codons differing at exactly one nucleotide, zero otherwise.  Models are
reversible, so everything is computed from the eigendecomposition of the
symmetrized generator ``D^1/2 Q D^-1/2`` with ``D = diag(pi)``.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field

import numpy as np

from .seqio import MISSING, GeneticCode, CodonAlignment

_PURINES = set("AG")


class InvalidParameter(ValueError):
    pass


class LabelSet(enum.Enum):
    """Which codon substitutions a labeled distance counts."""

    ALL = "all"
    SYN = "syn"
    NONSYN = "nonsyn"

    @classmethod
    def parse(cls, value) -> LabelSet:
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower())

    def mask(self, code: GeneticCode | None = None) -> np.ndarray:
        """Boolean matrix over ordered sense-codon pairs in this label set."""
        s = _code_structure(code or GeneticCode.standard())
        if self is LabelSet.ALL:
            return s.single.copy()
        if self is LabelSet.SYN:
            return s.single & s.synonymous
        return s.single & ~s.synonymous


@dataclass(frozen=True)
class _CodeStructure:
    single: np.ndarray  # codon pairs one nucleotide apart
    transition: np.ndarray  # ... where that change is a transition
    synonymous: np.ndarray  # same amino acid (diagonal included)
    nucleotides: np.ndarray  # (n_sense, 3) nucleotide characters


@functools.lru_cache(maxsize=8)
def _code_structure(code: GeneticCode) -> _CodeStructure:
    sense = code.sense_codons
    nuc = np.array([list(c) for c in sense])
    diff = nuc[:, None, :] != nuc[None, :, :]
    single = diff.sum(axis=2) == 1
    pur = np.isin(nuc, list(_PURINES))
    # a single change is a transition when both bases share purine/pyrimidine class
    same_class = pur[:, None, :] == pur[None, :, :]
    transition = single & (diff & same_class).any(axis=2)
    aa = code.amino_acids
    synonymous = aa[:, None] == aa[None, :]
    return _CodeStructure(single, transition, synonymous, nuc)


def single_step_neighbors(code: GeneticCode | None = None) -> list:
    """For each sense codon, the sense codons one nucleotide change away."""
    s = _code_structure(code or GeneticCode.standard())
    return [np.flatnonzero(row) for row in s.single]


def _unscaled_rates(kappa, omega, pi, code):
    s = _code_structure(code)
    R = np.where(s.single, 1.0, 0.0)
    R = R * np.where(s.transition, kappa, 1.0)
    R = R * np.where(s.synonymous, 1.0, omega)
    return R * pi[None, :]


def _check_pi(pi, n):
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (n,):
        raise InvalidParameter(f"pi must have {n} entries, got shape {pi.shape}")
    if np.any(~np.isfinite(pi)) or np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-8:
        raise InvalidParameter("pi must be a strictly positive distribution summing to 1")
    return pi / pi.sum()


def raw_rate(kappa: float, omega: float, pi, code: GeneticCode | None = None) -> float:
    """Mean substitution rate sum_i pi_i lambda_i before normalization."""
    code = code or GeneticCode.standard()
    pi = np.asarray(pi, dtype=float)
    return float(pi @ _unscaled_rates(kappa, omega, pi, code).sum(axis=1))


@dataclass(frozen=True, eq=False)
class CodonModel:
    """Reversible codon generator with cached spectral decomposition.

    ``Q`` is divided by ``rate_scale``; for a stand-alone model this is the
    raw mean rate so that one time unit is one expected substitution per
    codon.  Mixture components share a common scale instead.
    """

    kappa: float
    omega: float
    pi: np.ndarray
    Q: np.ndarray
    code: GeneticCode
    rate_scale: float
    eigenvalues: np.ndarray = field(repr=False)
    _U: np.ndarray = field(repr=False)  # D^-1/2 V
    _W: np.ndarray = field(repr=False)  # V^T D^1/2

    @property
    def n_states(self) -> int:
        return self.pi.shape[0]

    @property
    def mean_rate(self) -> float:
        return float(-(self.pi @ np.diag(self.Q)))

    def transition_matrix(self, t: float) -> np.ndarray:
        return transition_probabilities(self, t)


def build_model(
    kappa: float,
    omega: float,
    pi,
    code: GeneticCode | None = None,
    rate_scale: float | None = None,
) -> CodonModel:
    """Build a normalized GY94 generator.

    Parameters
    ----------
    kappa : float
        Transition/transversion ratio, > 0.
    omega : float
        Nonsynonymous/synonymous rate ratio, >= 0.
    pi : array_like
        Stationary codon frequencies over the sense codons.
    rate_scale : float, optional
        Divide raw rates by this instead of the model's own mean rate.
    """
    code = code or GeneticCode.standard()
    if not np.isfinite(kappa) or kappa <= 0:
        raise InvalidParameter(f"kappa must be > 0, got {kappa}")
    if not np.isfinite(omega) or omega < 0:
        raise InvalidParameter(f"omega must be >= 0, got {omega}")
    pi = _check_pi(pi, code.n_sense)
    R = _unscaled_rates(kappa, omega, pi, code)
    if rate_scale is None:
        rate_scale = float(pi @ R.sum(axis=1))
    if rate_scale <= 0:
        raise InvalidParameter("rate scale must be positive")
    Q = R / rate_scale
    np.fill_diagonal(Q, -Q.sum(axis=1))
    sq = np.sqrt(pi)
    A = sq[:, None] * Q / sq[None, :]
    A = 0.5 * (A + A.T)
    lam, V = np.linalg.eigh(A)
    for arr in (Q, lam, V, pi):
        arr.setflags(write=False)
    U = V / sq[:, None]
    W = V.T * sq[None, :]
    U.setflags(write=False)
    W.setflags(write=False)
    return CodonModel(float(kappa), float(omega), pi, Q, code, float(rate_scale), lam, U, W)


def transition_probabilities(model: CodonModel, t: float) -> np.ndarray:
    """P(t) = exp(Q t) from the spectral decomposition."""
    if t < 0:
        raise InvalidParameter(f"time must be >= 0, got {t}")
    if t == 0:
        return np.eye(model.n_states)
    P = (model._U * np.exp(model.eigenvalues * t)) @ model._W
    np.clip(P, 0.0, 1.0, out=P)
    P /= P.sum(axis=1, keepdims=True)
    return P


def labeled_rate_matrix(model: CodonModel, labels: LabelSet) -> np.ndarray:
    """Off-diagonal rates of ``model`` restricted to the label set."""
    Q = model.Q.copy()
    np.fill_diagonal(Q, 0.0)
    return np.where(LabelSet.parse(labels).mask(model.code), Q, 0.0)


def labeled_flux(model: CodonModel, labels: LabelSet) -> float:
    """Stationary rate of labeled jumps, sum_i pi_i sum_j lambda_ij 1{(i,j) in L}."""
    return float(model.pi @ labeled_rate_matrix(model, labels).sum(axis=1))


def _integral_kernel(eigenvalues, t):
    """J_ab = int_0^t exp(l_a s) exp(l_b (t - s)) ds."""
    la = eigenvalues[:, None]
    lb = eigenvalues[None, :]
    half = 0.5 * (la - lb) * t
    small = np.abs(half) < 1e-5
    safe = np.where(small, 1.0, half)
    shc = np.where(small, 1.0 + half * half / 6.0, np.sinh(safe) / safe)
    return t * np.exp(0.5 * (la + lb) * t) * shc


def expected_jumps_joint(model: CodonModel, labels: LabelSet, t: float) -> np.ndarray:
    """Matrix of E[N_L(t) 1{X_t = j} | X_0 = i], N_L counting labeled jumps."""
    if t == 0:
        return np.zeros((model.n_states, model.n_states))
    xi = model._W @ labeled_rate_matrix(model, labels) @ model._U
    return model._U @ (xi * _integral_kernel(model.eigenvalues, t)) @ model._W


def conditional_jump_counts(model: CodonModel, labels: LabelSet, t: float) -> np.ndarray:
    """E[N_L(t) | X_0 = i, X_t = j]; entries with P_ij(t) = 0 are set to 0."""
    joint = expected_jumps_joint(model, labels, t)
    if t == 0:
        return joint
    P = (model._U * np.exp(model.eigenvalues * t)) @ model._W
    ok = P > 1e-300
    return np.where(ok, joint / np.where(ok, P, 1.0), 0.0)


def f1x4_frequencies(aln: CodonAlignment, pseudocount: float = 1.0) -> np.ndarray:
    """Codon frequencies from pooled nucleotide frequencies (F1x4).

    Nucleotide counts over all observed codons (all three positions pooled)
    plus ``pseudocount`` per base are multiplied across positions and
    renormalized over the sense codons.  The pseudocount keeps every codon
    frequency positive on short or compositionally extreme alignments.
    """
    code = aln.code
    nuc = _code_structure(code).nucleotides
    counts = dict.fromkeys("TCAG", pseudocount)
    obs = aln.codons[aln.codons != MISSING]
    if obs.size:
        per_codon = np.bincount(obs, minlength=code.n_sense)
        for pos in range(3):
            for base in "TCAG":
                counts[base] += per_codon[nuc[:, pos] == base].sum()
    total = sum(counts.values())
    freq = {b: c / total for b, c in counts.items()}
    pi = np.array([freq[a] * freq[b] * freq[c] for a, b, c in nuc])
    return pi / pi.sum()


@dataclass(frozen=True)
class M3Params:
    """Three-class omega mixture (M3) with shared kappa and codon frequencies."""

    kappa: float
    omegas: tuple
    probs: tuple
    pi: np.ndarray = field(repr=False)
    log_likelihood: float | None = None
    degenerate: bool = False

    def __post_init__(self):
        omegas = tuple(float(w) for w in self.omegas)
        probs = np.asarray(self.probs, dtype=float)
        if len(omegas) != len(probs):
            raise InvalidParameter("omegas and probs must have equal length")
        if np.any(probs < -1e-15) or abs(probs.sum() - 1.0) > 1e-12:
            raise InvalidParameter(f"mixture probabilities must sum to 1, got {probs}")
        if any(w < 0 for w in omegas):
            raise InvalidParameter("omegas must be >= 0")
        order = sorted(range(len(omegas)), key=lambda i: omegas[i])
        object.__setattr__(self, "omegas", tuple(omegas[i] for i in order))
        object.__setattr__(self, "probs", tuple(float(max(probs[i], 0.0)) for i in order))
        object.__setattr__(self, "pi", np.asarray(self.pi, dtype=float))

    @property
    def mean_omega(self) -> float:
        return float(np.dot(self.omegas, self.probs))

    def with_pi(self, pi) -> M3Params:
        return M3Params(self.kappa, self.omegas, self.probs, pi, self.log_likelihood, self.degenerate)

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "omegas": list(self.omegas),
            "probs": list(self.probs),
            "logL": self.log_likelihood,
        }


def mixture_models(params: M3Params, code: GeneticCode | None = None) -> list:
    """One generator per omega class, sharing a common rate scale.

    The scale makes the class-averaged substitution rate one per codon per
    unit time, so branch lengths keep the same meaning as for a single-omega
    model with omega equal to the mixture mean.
    """
    code = code or GeneticCode.standard()
    pi = _check_pi(params.pi, code.n_sense)
    scale = sum(
        p * raw_rate(params.kappa, w, pi, code) for w, p in zip(params.omegas, params.probs)
    )
    return [build_model(params.kappa, w, pi, code, rate_scale=scale) for w in params.omegas]
