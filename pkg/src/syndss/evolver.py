"""Codon sequence simulation on trees and the three study scenarios.

* NULL: one tree for the whole alignment.
* RECOMBINATION: two segments simulated on two trees and concatenated.
* CONVERGENT: one tree, then two target taxa are pushed toward shared amino
  acids at a random subset of sites inside a region.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .codon_ctmc import (
    CodonModel,
    LabelSet,
    M3Params,
    mixture_models,
    transition_probabilities,
)
from .ls_tree import Phylogeny, parse_newick
from .seqio import MISSING, CodonAlignment, GeneticCode, variable_sites

DEFAULT_OMEGAS = (0.1, 0.8, 3.2)
# mixture weights giving ~50%, ~60% and ~75% synonymous substitutions
PRESETS = {
    "p1": (0.74, 0.24, 0.02),
    "p2": (0.85, 0.14, 0.01),
    "p3": (0.99, 0.009, 0.001),
}
PRESET_ALIASES = {"syn50": "p1", "syn60": "p2", "syn75": "p3"}
DIVERSITY = {"high": 1.0, "medium": 0.80, "low": 0.67}


class Scenario(enum.Enum):
    NULL = "null"
    RECOMBINATION = "recombination"
    CONVERGENT = "convergent"


class TaxaMismatch(ValueError):
    pass


class ConfigError(ValueError):
    pass


class InsufficientEligibleSites(UserWarning):
    pass


@dataclass(frozen=True)
class RngStream:
    """Reproducible random substream identified by (master seed, path of ids)."""

    master_seed: int
    stream_id: tuple = ()

    def child(self, *ids: int) -> RngStream:
        return RngStream(self.master_seed, self.stream_id + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.stream_id)
        return np.random.default_rng(seq)


def _as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def load_fixture_tree(name: str = "A") -> Phylogeny:
    """Bundled five-taxon study trees ``"A"`` and ``"B"`` (B swaps taxa 2 and 5)."""
    fname = {"A": "tree_a.nwk", "B": "tree_b.nwk"}[name.upper()]
    text = resources.files("syndss").joinpath("data", fname).read_text()
    return parse_newick(text)


def _edge_order(tree: Phylogeny):
    """(parent, child, edge index) in breadth-first order from the node next to tip 0."""
    adj = tree.topology.adjacency()
    eidx = {}
    for i, (u, v) in enumerate(tree.topology.edges):
        eidx[u, v] = eidx[v, u] = i
    root = adj[0][0]
    order, queue, seen = [], [root], {root}
    while queue:
        x = queue.pop(0)
        for y in adj[x]:
            if y not in seen:
                seen.add(y)
                order.append((x, y, eidx[x, y]))
                queue.append(y)
    return root, order


def _sample_rows(P, states, gen):
    cum = np.cumsum(P[states], axis=1)
    u = gen.random(states.size) * cum[:, -1]
    return np.minimum((u[:, None] >= cum).sum(axis=1), P.shape[0] - 1)


def simulate_alignment(
    tree: Phylogeny,
    n_codons: int,
    m3: M3Params,
    rng,
    code: GeneticCode | None = None,
) -> CodonAlignment:
    """Simulate codon sequences down ``tree`` under the M3 mixture.

    Each site draws its omega class from ``m3.probs`` and its root codon
    from ``m3.pi``, then every edge samples the child codon from the class
    transition matrix for that edge length.  Rows follow ``tree.names``.
    """
    if n_codons < 1:
        raise ValueError("n_codons must be >= 1")
    code = code or GeneticCode.standard()
    gen = _as_generator(rng)
    models = mixture_models(m3, code)
    classes = gen.choice(len(models), size=n_codons, p=np.asarray(m3.probs))
    root, order = _edge_order(tree)
    states = {root: gen.choice(code.n_sense, size=n_codons, p=m3.pi / m3.pi.sum())}
    for parent, child, e in order:
        b = tree.lengths[e]
        cur = states[parent]
        nxt = cur.copy()
        if b > 0:
            for c, model in enumerate(models):
                sel = np.flatnonzero(classes == c)
                if sel.size:
                    P = transition_probabilities(model, b)
                    nxt[sel] = _sample_rows(P, cur[sel], gen)
        states[child] = nxt
    codons = np.stack([states[i] for i in range(tree.n_tips)])
    return CodonAlignment(tree.names, codons, code)


def gillespie_counts(model: CodonModel, starts, t: float, rng, labels=(LabelSet.ALL,)):
    """Direct simulation of CTMC paths; returns end states and labeled jump counts.

    Parameters
    ----------
    starts : array_like of int
        Start state of each path.
    labels : sequence of LabelSet
        Counts are returned per label, shape ``(len(labels), n_paths)``.
    """
    gen = _as_generator(rng)
    Q = np.asarray(model.Q)
    n = Q.shape[0]
    out_rate = -np.diag(Q)
    jump = np.where(np.eye(n, dtype=bool), 0.0, Q) / out_rate[:, None]
    cum = np.cumsum(jump, axis=1)
    masks = np.stack([LabelSet.parse(lab).mask(model.code) for lab in labels])
    state = np.array(starts, dtype=np.intp)
    clock = np.zeros(state.size)
    counts = np.zeros((len(labels), state.size), dtype=np.int64)
    live = np.arange(state.size)
    while live.size:
        clock[live] += gen.exponential(1.0 / out_rate[state[live]])
        live = live[clock[live] < t]
        if not live.size:
            break
        src = state[live]
        u = gen.random(live.size)
        dst = np.minimum((u[:, None] >= cum[src]).sum(axis=1), n - 1)
        counts[:, live] += masks[:, src, dst]
        state[live] = dst
    return state, counts


def default_m3(preset: str = "p1", kappa: float = 2.0, pi=None) -> M3Params:
    key = PRESET_ALIASES.get(preset, preset)
    if key not in PRESETS:
        raise ConfigError(f"unknown mixture preset {preset!r}")
    if pi is None:
        pi = np.full(61, 1 / 61)
    return M3Params(kappa, DEFAULT_OMEGAS, PRESETS[key], pi)


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to simulate one replicate of a study scenario.

    ``target_taxa`` and ``region`` use 1-based taxon numbers and a 0-based
    half-open codon interval respectively.
    """

    scenario: Scenario = Scenario.NULL
    tree_a: Phylogeny = field(default_factory=lambda: load_fixture_tree("A"))
    tree_b: Phylogeny | None = None
    lengths: tuple = (400, 632)
    m3: M3Params = field(default_factory=default_m3)
    branch_scale: float = 1.0
    target_taxa: tuple = (2, 5)
    region: tuple | None = None
    convert_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.scenario, Scenario):
            object.__setattr__(self, "scenario", Scenario(str(self.scenario).lower()))
        if any(x <= 0 for x in self.lengths):
            raise ConfigError(f"lengths: every segment must be positive, got {self.lengths}")
        if not 0.0 <= self.convert_fraction <= 1.0:
            raise ConfigError("convert_fraction must lie in [0, 1]")
        if self.branch_scale <= 0:
            raise ConfigError("branch_scale must be positive")
        if self.scenario is Scenario.RECOMBINATION:
            if len(self.lengths) != 2:
                raise ConfigError("lengths: recombination needs exactly two segments")
            tb = self.tree_b if self.tree_b is not None else load_fixture_tree("B")
            if sorted(tb.names) != sorted(self.tree_a.names):
                raise TaxaMismatch("tree_a and tree_b must have identical taxa")
            object.__setattr__(self, "tree_b", tb)
        if self.scenario is Scenario.CONVERGENT:
            a, b = self.target_taxa
            n = self.tree_a.n_tips
            if a == b or not (1 <= a <= n and 1 <= b <= n):
                raise ConfigError(f"target_taxa must be two distinct taxa in 1..{n}")
            lo, hi = self.region if self.region is not None else (self.lengths[0], self.n_codons)
            if not 0 <= lo < hi <= self.n_codons:
                raise ConfigError(f"region [{lo}, {hi}) outside alignment of {self.n_codons} codons")
            object.__setattr__(self, "region", (lo, hi))

    @property
    def n_codons(self) -> int:
        return int(sum(self.lengths))

    def with_(self, **kw) -> ScenarioConfig:
        return replace(self, **kw)


def simulate_recombinant(cfg: ScenarioConfig, rng) -> CodonAlignment:
    """Concatenate a segment simulated on tree_a with one simulated on tree_b."""
    if cfg.scenario is not Scenario.RECOMBINATION:
        raise ConfigError("simulate_recombinant needs a RECOMBINATION config")
    gen = _as_generator(rng)
    ta = cfg.tree_a.scaled(cfg.branch_scale)
    tb = cfg.tree_b.reordered(cfg.tree_a.names).scaled(cfg.branch_scale)
    first = simulate_alignment(ta, cfg.lengths[0], cfg.m3, gen)
    second = simulate_alignment(tb, cfg.lengths[1], cfg.m3, gen)
    return CodonAlignment(first.names, np.hstack([first.codons, second.codons]), first.code)


def _convergence_options(code, ci, cj, neighbors):
    aa = code.amino_acids
    ai, aj = aa[ci], aa[cj]
    by_aa = {}
    for x in neighbors[ci]:
        if aa[x] not in (ai, aj):
            by_aa.setdefault(aa[x], ([], []))[0].append(x)
    for y in neighbors[cj]:
        if aa[y] in by_aa:
            by_aa[aa[y]][1].append(y)
    return [(x, y) for k in sorted(by_aa) for x in by_aa[k][0] for y in by_aa[k][1]]


def induce_convergence(aln: CodonAlignment, cfg: ScenarioConfig, rng) -> CodonAlignment:
    """Make the two target taxa encode a shared new amino acid at random sites.

    Eligible sites lie in ``cfg.region``, have the targets encoding different
    amino acids, and admit a third amino acid reachable from each target
    codon by one nucleotide change.  Each eligible site is converted with
    probability ``convert_fraction * V / E`` (V: variable sites in the
    region, E: eligible sites) so that on average ``convert_fraction`` of the
    region's variable sites get converted.  The replacement codon pair is
    drawn uniformly from all valid options.
    """
    from .codon_ctmc import single_step_neighbors

    if cfg.scenario is not Scenario.CONVERGENT:
        raise ConfigError("induce_convergence needs a CONVERGENT config")
    gen = _as_generator(rng)
    if cfg.convert_fraction == 0:
        return aln
    i, j = (t - 1 for t in cfg.target_taxa)
    lo, hi = cfg.region
    code = aln.code
    nbrs = single_step_neighbors(code)
    codons = np.array(aln.codons)
    region_var = [s for s in variable_sites(aln) if lo <= s < hi]
    eligible = []
    for s in range(lo, hi):
        ci, cj = codons[i, s], codons[j, s]
        if ci == MISSING or cj == MISSING or code.amino_acids[ci] == code.amino_acids[cj]:
            continue
        opts = _convergence_options(code, ci, cj, nbrs)
        if opts:
            eligible.append((s, opts))
    need = cfg.convert_fraction * len(region_var)
    if not eligible:
        if need > 0:
            warnings.warn("no eligible sites for convergence", InsufficientEligibleSites, stacklevel=2)
        return aln
    q = need / len(eligible)
    if q > 1:
        warnings.warn(
            f"{len(eligible)} eligible sites < {need:.1f} required; converting all",
            InsufficientEligibleSites,
            stacklevel=2,
        )
        q = 1.0
    picks = gen.random(len(eligible)) < q
    for (s, opts), take in zip(eligible, picks):
        if take:
            x, y = opts[gen.integers(len(opts))]
            codons[i, s], codons[j, s] = x, y
    return CodonAlignment(aln.names, codons, code)


def simulate_scenario(cfg: ScenarioConfig, rng) -> CodonAlignment:
    """One replicate alignment for ``cfg``."""
    gen = _as_generator(rng)
    if cfg.scenario is Scenario.RECOMBINATION:
        return simulate_recombinant(cfg, gen)
    aln = simulate_alignment(cfg.tree_a.scaled(cfg.branch_scale), cfg.n_codons, cfg.m3, gen)
    if cfg.scenario is Scenario.CONVERGENT:
        aln = induce_convergence(aln, cfg, gen)
    return aln
