import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from syndss.codon_ctmc import LabelSet, build_model
from syndss.dss_engine import (
    AllWindowsDegenerate,
    DegenerateHalf,
    WindowSpec,
    WindowTooLong,
    _half_distances,
    enumerate_windows,
    landscapes_json,
    scan,
    scan_labels,
    scan_model,
    standardize,
    window_dss,
)
from syndss.evolver import (
    RngStream,
    Scenario,
    ScenarioConfig,
    default_m3,
    load_fixture_tree,
    simulate_alignment,
    simulate_scenario,
)
from syndss.ls_tree import Phylogeny, all_topologies, ls_tree_search
from syndss.pairwise_dist import DistanceMatrix, distance_matrices
from syndss.seqio import CodonAlignment, encode_sequences

LABELS = [LabelSet.ALL, LabelSet.SYN, LabelSet.NONSYN]


def dm(values):
    values = np.asarray(values, float)
    return DistanceMatrix(values, tuple(f"t{i}" for i in range(values.shape[0])))


def edge_path_design(tree):
    """Pair-by-edge path indicators found by walking the tree (no split masks)."""
    n = tree.n_tips
    adj = {}
    for e, (u, v) in enumerate(tree.topology.edges):
        adj.setdefault(u, []).append((v, e))
        adj.setdefault(v, []).append((u, e))
    rows = []
    for k in range(n):
        for m in range(k + 1, n):
            stack, prev = [(k, None, [])], None
            while stack:
                node, parent, path = stack.pop()
                if node == m:
                    prev = path
                    break
                stack += [(x, node, path + [e]) for x, e in adj[node] if x != parent]
            row = np.zeros(len(tree.topology.edges))
            row[prev] = 1
            rows.append(row)
    return np.array(rows)


@pytest.fixture(scope="module")
def rec_aln():
    cfg = ScenarioConfig(Scenario.RECOMBINATION, m3=default_m3("p1"))
    return simulate_scenario(cfg, RngStream(31))


def test_window_counts():
    assert len(enumerate_windows(565, WindowSpec(200, 3))) == 122
    assert len(enumerate_windows(108, WindowSpec(48, 2))) == 31
    wins = enumerate_windows(30, WindowSpec(10, 4))
    assert wins[0] == (0, 10) and wins[-1] == (20, 30)
    with pytest.raises(WindowTooLong):
        enumerate_windows(10, WindowSpec(12, 2))


def test_window_spec_validation():
    with pytest.raises(ValueError):
        WindowSpec(7, 1)
    with pytest.raises(ValueError):
        WindowSpec(10, 0)
    assert WindowSpec.from_nucleotides(636, 30) == WindowSpec(212, 10)
    with pytest.raises(ValueError, match="divisible by 3"):
        WindowSpec.from_nucleotides(7, 3)


def test_standardize():
    D = dm([[0, 1, 2], [1, 0, 3], [2, 3, 0]])
    assert np.allclose(standardize(D, 2.0).values, D.values)
    assert np.allclose(standardize(D, 4.0).values, 2 * D.values)
    assert standardize(D, 3.7).mean == pytest.approx(3.7, abs=1e-12)
    with pytest.raises(DegenerateHalf):
        standardize(dm(np.zeros((3, 3))), 1.0)


def test_identical_halves_give_zero():
    D = dm(load_fixture_tree("A").path_distances() + 0.01 * np.eye(5)[::-1])
    for orient in ("misfit", "literal"):
        assert abs(window_dss(D, D, 0.5, orient)) < 1e-10


def test_same_tree_different_scales():
    D = load_fixture_tree("A").path_distances()
    assert abs(window_dss(dm(D), dm(3 * D), 0.4)) < 1e-10


def test_incongruent_halves_manual_oracle():
    A, B = load_fixture_tree("A"), load_fixture_tree("B")
    d1, d2 = dm(A.path_distances()), dm(B.reordered(A.names).path_distances())
    dbar = 0.5 * (d1.mean + d2.mean)
    # step by step: rescale, fit tree A's topology with an explicit design matrix
    s1 = d1.values * dbar / d1.mean
    s2 = d2.values * dbar / d2.mean
    iu = np.triu_indices(5, 1)
    fit = ls_tree_search(s1)
    assert fit.ss < 1e-20
    X = edge_path_design(fit.tree)
    b = np.maximum(np.linalg.lstsq(X, s2[iu], rcond=None)[0], 0)
    r = s2[iu] - X @ b
    ssb = r @ r
    assert ssb > 1e-3
    assert window_dss(d1, d2, dbar) == pytest.approx(ssb, rel=1e-10)
    assert window_dss(d1, d2, dbar, "literal") == pytest.approx(-ssb, rel=1e-10)


def test_unknown_orientation():
    D = dm(load_fixture_tree("A").path_distances())
    with pytest.raises(ValueError):
        window_dss(D, D, 1.0, "sideways")


def test_identical_sequences_raise():
    aln = encode_sequences([f"t{i}" for i in range(5)], ["ATGGCTAAA" * 10] * 5)
    model = build_model(2.0, 0.5, np.full(61, 1 / 61))
    with pytest.raises(AllWindowsDegenerate):
        scan(aln, WindowSpec(10, 5), "all", model)
    assert scan_labels(aln, WindowSpec(10, 5), LABELS, model, strict=False) == {
        lab: None for lab in LABELS}


def reference_landscape(aln, spec, lab, model, orientation):
    whole = distance_matrices(aln, [lab], model)[lab]
    out = []
    for s, e in enumerate_windows(aln.n_codons, spec):
        h = s + spec.half
        first = distance_matrices(aln, [lab], model, s, h)[lab]
        second = distance_matrices(aln, [lab], model, h, e)[lab]
        try:
            f = window_dss(first, second, whole.mean, orientation)
            b = window_dss(second, first, whole.mean, orientation)
        except DegenerateHalf:
            out.append(None)
            continue
        out.append((f, b))
    return out


@pytest.mark.parametrize("orientation", ["misfit", "literal"])
def test_vectorized_scan_matches_reference(rec_aln, orientation):
    spec = WindowSpec(100, 60)
    model = scan_model(rec_aln, 2.0, 0.4)
    lands = scan_labels(rec_aln, spec, LABELS, model, orientation=orientation)
    for lab in LABELS:
        ref = reference_landscape(rec_aln, spec, lab, model, orientation)
        got = lands[lab].windows
        assert len(got) == len(ref)
        for w, r in zip(got, ref):
            assert w.skipped == (r is None)
            if r is not None:
                assert w.dss_forward == pytest.approx(r[0], abs=1e-9)
                assert w.dss_backward == pytest.approx(r[1], abs=1e-9)
                assert w.dss == max(w.dss_forward, w.dss_backward)


def test_orientations_are_mirror_images(rec_aln):
    spec = WindowSpec(100, 100)
    model = scan_model(rec_aln, 2.0, 0.4)
    a = scan(rec_aln, spec, "syn", model)
    b = scan(rec_aln, spec, "syn", model, orientation="literal")
    for x, y in zip(a.windows, b.windows):
        assert x.dss_forward == pytest.approx(-y.dss_forward, abs=1e-12)


def test_large_tree_uses_search_path():
    gen = np.random.default_rng(3)
    topos = all_topologies(7)
    big = Phylogeny(tuple(f"s{i}" for i in range(7)), topos[17], gen.uniform(0.05, 0.3, 11))
    aln = simulate_alignment(big, 120, default_m3("p1"), RngStream(5))
    model = scan_model(aln, 2.0, 0.4)
    land = scan(aln, WindowSpec(60, 30), "all", model)
    ref = reference_landscape(aln, WindowSpec(60, 30), LabelSet.ALL, model, "misfit")
    for w, r in zip(land.windows, ref):
        assert w.dss_forward == pytest.approx(r[0], abs=1e-9)


def test_label_additivity_in_every_half(rec_aln):
    spec = WindowSpec(200, 10)
    model = scan_model(rec_aln, 2.0, 0.4)
    wins, table = _half_distances(rec_aln, spec, LABELS, model, "counting")
    v = table.vecs
    assert np.abs(v[LabelSet.ALL] - v[LabelSet.SYN] - v[LabelSet.NONSYN]).max() < 1e-9
    for s, e in wins[::20]:
        h = s + spec.half
        for lo, hi in ((s, h), (h, e)):
            m = distance_matrices(rec_aln, LABELS, model, lo, hi)
            diff = m[LabelSet.ALL].values - m[LabelSet.SYN].values - m[LabelSet.NONSYN].values
            assert np.abs(diff).max() < 1e-9


def test_csv_and_json(rec_aln):
    model = scan_model(rec_aln, 2.0, 0.4)
    land = scan(rec_aln, WindowSpec(200, 100), "all", model)
    rows = list(csv.reader(io.StringIO(land.to_csv())))
    assert rows[0] == ["start", "mid", "end", "dss_forward", "dss_backward", "dss", "skipped"]
    assert rows[1][:3] == ["1", "101", "200"]
    assert len(rows) == len(land.windows) + 1
    with_thr = list(csv.reader(io.StringIO(land.to_csv(threshold=0.25))))
    assert with_thr[0][-1] == "threshold_95" and with_thr[1][-1] == "0.25"
    summary = json.loads(landscapes_json({LabelSet.ALL: land}, seed=3))
    assert summary["all"]["dss_max"] == land.dss_max and summary["seed"] == 3


def test_recombination_peak_near_breakpoint():
    # breakpoint at codon 400; the best ALL window should straddle it
    cfg = ScenarioConfig(Scenario.RECOMBINATION, m3=default_m3("p1"))
    spec = WindowSpec(200, 10)
    hits = 0
    for i in range(9):
        aln = simulate_scenario(cfg, RngStream(600, (i,)))
        best = scan(aln, spec, "all", scan_model(aln, 2.0, 0.4)).best_window
        hits += abs(best.mid - 400) <= spec.half
    assert hits >= 5


@settings(max_examples=10)
@given(st.integers(0, 2**31), st.permutations(range(5)))
def test_taxon_order_invariance(seed, perm):
    aln = simulate_alignment(load_fixture_tree("A"), 120, default_m3("p1"), RngStream(seed))
    model = scan_model(aln, 2.0, 0.4)
    shuffled = CodonAlignment(tuple(aln.names[i] for i in perm), aln.codons[list(perm)])
    a = scan(aln, WindowSpec(60, 20), "all", model)
    b = scan(shuffled, WindowSpec(60, 20), "all", model)
    assert a.dss_max == pytest.approx(b.dss_max, abs=1e-9)


@settings(max_examples=10)
@given(st.integers(0, 2**31))
def test_window_is_max_of_directions(seed):
    aln = simulate_alignment(load_fixture_tree("A"), 90, default_m3("p3"), RngStream(seed))
    lands = scan_labels(aln, WindowSpec(30, 15), LABELS, scan_model(aln, 2.0, 0.3), strict=False)
    for land in lands.values():
        if land is None:
            continue
        for w in land.retained:
            assert w.dss == max(w.dss_forward, w.dss_backward)
        assert land.dss_max == max(w.dss for w in land.retained)
