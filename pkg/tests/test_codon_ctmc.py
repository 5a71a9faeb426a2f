import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from syndss.codon_ctmc import (
    InvalidParameter,
    LabelSet,
    M3Params,
    build_model,
    conditional_jump_counts,
    expected_jumps_joint,
    f1x4_frequencies,
    labeled_flux,
    labeled_rate_matrix,
    mixture_models,
    transition_probabilities,
)
from syndss.evolver import RngStream, gillespie_counts
from syndss.seqio import GeneticCode, encode_sequences

CODE = GeneticCode.standard()
UNIFORM = np.full(61, 1 / 61)

# Enumeration of all single-nucleotide sense-codon neighbour pairs under the
# standard code, done with plain string handling: 526 ordered pairs, 134 of
# them synonymous.  With kappa=2, omega=0.5 the weighted synonymous share is
# 196/450.
SYN_PAIRS, ALL_PAIRS = 134, 526
SYN_SHARE_K2_W05 = 196 / 450


def random_pi(rng):
    x = rng.gamma(2.0, size=61)
    return x / x.sum()


def taylor_expm(A, order=30):
    """Scaling and squaring with a truncated Taylor series (independent of eigh)."""
    norm = np.abs(A).sum(axis=1).max()
    s = max(0, int(np.ceil(np.log2(max(norm, 1e-300)))) + 1)
    B = A / 2**s
    term = np.eye(A.shape[0])
    out = term.copy()
    for k in range(1, order + 1):
        term = term @ B / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def neighbour_pairs():
    aa = dict(zip(CODE.sense_codons, CODE.amino_acids))
    for c in CODE.sense_codons:
        for pos, base in itertools.product(range(3), "TCAG"):
            d = c[:pos] + base + c[pos + 1:]
            if d != c and d in aa:
                yield c, d, aa[c] == aa[d]


def test_enumeration_matches_frozen_counts():
    pairs = list(neighbour_pairs())
    assert len(pairs) == ALL_PAIRS
    assert sum(s for *_, s in pairs) == SYN_PAIRS


def test_syn_share_equals_enumeration_at_unit_parameters():
    m = build_model(1.0, 1.0, UNIFORM)
    assert labeled_flux(m, "syn") == pytest.approx(SYN_PAIRS / ALL_PAIRS, abs=1e-12)


def test_syn_share_weighted():
    m = build_model(2.0, 0.5, UNIFORM)
    assert labeled_flux(m, LabelSet.SYN) == pytest.approx(SYN_SHARE_K2_W05, abs=1e-12)


def test_omega_zero_kills_nonsynonymous():
    m = build_model(3.0, 0.0, UNIFORM)
    assert np.all(labeled_rate_matrix(m, LabelSet.NONSYN) == 0)
    assert labeled_flux(m, "syn") == pytest.approx(1.0, abs=1e-12)
    assert labeled_flux(m, "nonsyn") == 0.0


def test_generator_structure(rng):
    pi = random_pi(rng)
    m = build_model(2.5, 0.3, pi)
    Q = m.Q
    off = Q - np.diag(np.diag(Q))
    assert np.all(off >= 0)
    assert np.allclose(Q.sum(axis=1), 0, atol=1e-12)
    single = LabelSet.ALL.mask(CODE)
    assert np.all(off[~single] == 0)
    assert np.abs(pi @ Q).max() < 1e-10
    assert m.mean_rate == pytest.approx(1.0, abs=1e-10)
    flux = pi[:, None] * off
    assert np.abs(flux - flux.T).max() < 1e-12


def test_rate_form(rng):
    pi = random_pi(rng)
    m = build_model(2.0, 0.4, pi)
    purine = set("AG")
    raw = {}
    for c, d, syn in neighbour_pairs():
        pos = next(k for k in range(3) if c[k] != d[k])
        ts = (c[pos] in purine) == (d[pos] in purine)
        raw[c, d] = pi[CODE.index(d)] * (2.0 if ts else 1.0) * (1.0 if syn else 0.4)
    ratio = {k: m.Q[CODE.index(k[0]), CODE.index(k[1])] / v for k, v in raw.items()}
    vals = np.array(list(ratio.values()))
    assert np.ptp(vals) < 1e-12 * vals.mean()


def test_invalid_parameters():
    with pytest.raises(InvalidParameter):
        build_model(0.0, 1.0, UNIFORM)
    with pytest.raises(InvalidParameter):
        build_model(1.0, -0.1, UNIFORM)
    with pytest.raises(InvalidParameter):
        build_model(1.0, 1.0, UNIFORM * 2)
    with pytest.raises(InvalidParameter):
        transition_probabilities(build_model(1.0, 1.0, UNIFORM), -1.0)


def test_transition_limits(rng):
    m = build_model(2.0, 0.5, random_pi(rng))
    assert np.array_equal(transition_probabilities(m, 0.0), np.eye(61))
    P = transition_probabilities(m, 500.0)
    assert np.abs(P - m.pi[None, :]).max() < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_expm_against_taylor_series(seed):
    rng = np.random.default_rng(seed)
    m = build_model(rng.uniform(0.5, 5), rng.uniform(0.05, 2), random_pi(rng))
    P = transition_probabilities(m, 0.3)
    assert np.abs(P - taylor_expm(m.Q * 0.3)).max() < 1e-9
    assert np.allclose(P.sum(axis=1), 1, atol=1e-10)
    assert P.min() >= 0 and P.max() <= 1


def test_expected_jumps_against_block_exponential(rng):
    # Van Loan: the upper-right block of exp([[Q, Q_L], [0, Q]] t) is the
    # integral of P(s) Q_L P(t - s) over [0, t].
    m = build_model(2.0, 0.7, random_pi(rng))
    t = 0.45
    for lab in LabelSet:
        QL = labeled_rate_matrix(m, lab)
        big = np.block([[m.Q, QL], [np.zeros_like(QL), m.Q]]) * t
        ref = expm(big)[:61, 61:]
        assert np.abs(expected_jumps_joint(m, lab, t) - ref).max() < 1e-10


def test_conditional_counts_are_additive_and_consistent(rng):
    m = build_model(1.7, 0.4, random_pi(rng))
    t = 0.8
    c = {lab: conditional_jump_counts(m, lab, t) for lab in LabelSet}
    assert np.abs(c[LabelSet.ALL] - c[LabelSet.SYN] - c[LabelSet.NONSYN]).max() < 1e-9
    # averaging over the stationary joint law gives back t * flux
    P = transition_probabilities(m, t)
    joint = m.pi[:, None] * P
    for lab in LabelSet:
        assert (joint * c[lab]).sum() == pytest.approx(t * labeled_flux(m, lab), rel=1e-9)


def test_gillespie_agrees_with_flux():
    m = build_model(2.0, 0.5, UNIFORM)
    n, t = 20000, 0.6
    starts = RngStream(3).generator().choice(61, size=n, p=m.pi)
    _, counts = gillespie_counts(m, starts, t, RngStream(4), labels=(LabelSet.SYN, LabelSet.ALL))
    for row, lab in enumerate((LabelSet.SYN, LabelSet.ALL)):
        x = counts[row]
        se = x.std(ddof=1) / np.sqrt(n)
        assert abs(x.mean() - t * labeled_flux(m, lab)) < 3 * se


def test_f1x4_positive_and_normalized():
    aln = encode_sequences(["a", "b"], ["AAAAAA", "AAGAAA"])
    pi = f1x4_frequencies(aln)
    assert pi.shape == (61,) and np.all(pi > 0)
    assert pi.sum() == pytest.approx(1.0, abs=1e-14)
    assert pi[CODE.index("AAA")] == pi.max()


def test_m3_canonical_order_and_validation():
    p = M3Params(2.0, (3.2, 0.1, 0.8), (0.02, 0.74, 0.24), UNIFORM)
    assert p.omegas == (0.1, 0.8, 3.2) and p.probs == (0.74, 0.24, 0.02)
    assert p.mean_omega == pytest.approx(0.074 + 0.192 + 0.064)
    with pytest.raises(InvalidParameter):
        M3Params(2.0, (0.1, 0.8, 3.2), (0.5, 0.5, 0.1), UNIFORM)


def test_mixture_shares_unit_mean_rate():
    p = M3Params(2.0, (0.1, 0.8, 3.2), (0.74, 0.24, 0.02), UNIFORM)
    models = mixture_models(p)
    avg = sum(w * m.mean_rate for w, m in zip(p.probs, models))
    assert avg == pytest.approx(1.0, abs=1e-12)
    single = build_model(2.0, p.mean_omega, UNIFORM)
    assert single.rate_scale == pytest.approx(models[0].rate_scale, rel=1e-12)


params = st.tuples(st.floats(0.2, 10), st.floats(0, 4), st.integers(0, 2**32 - 1))


@given(params)
def test_label_partition_and_normalization(args):
    kappa, omega, seed = args
    m = build_model(kappa, omega, random_pi(np.random.default_rng(seed)))
    syn, non = labeled_flux(m, "syn"), labeled_flux(m, "nonsyn")
    assert labeled_flux(m, "all") == pytest.approx(1.0, abs=1e-10)
    assert syn + non == pytest.approx(1.0, abs=1e-10)
    assert -1e-12 <= syn <= 1 + 1e-12


@given(params, st.floats(0.01, 2), st.floats(0.01, 2))
def test_chapman_kolmogorov(args, s, t):
    kappa, omega, seed = args
    m = build_model(kappa, omega, random_pi(np.random.default_rng(seed)))
    lhs = transition_probabilities(m, s + t)
    rhs = transition_probabilities(m, s) @ transition_probabilities(m, t)
    assert np.abs(lhs - rhs).max() < 1e-8


@given(params)
def test_detailed_balance(args):
    kappa, omega, seed = args
    m = build_model(kappa, omega, random_pi(np.random.default_rng(seed)))
    F = m.pi[:, None] * m.Q
    np.fill_diagonal(F, 0)
    assert np.abs(F - F.T).max() < 1e-12


def test_label_masks_partition():
    syn, non, all_ = (LabelSet.SYN.mask(CODE), LabelSet.NONSYN.mask(CODE),
                      LabelSet.ALL.mask(CODE))
    assert not np.any(syn & non)
    assert np.array_equal(syn | non, all_)
    aa = CODE.amino_acids
    i, j = np.nonzero(all_)
    assert np.array_equal(syn[i, j], aa[i] == aa[j])
