"""Flat ``key = value`` configuration files for simulations and studies.

Scenario keys
-------------
scenario          null | recombination | convergent
tree_a, tree_b    Newick file path, or ``A`` / ``B`` for the bundled trees
lengths           segment lengths in codons, comma separated (``400,632``)
preset            mixture weights: p1 | p2 | p3 (aliases syn50 | syn60 | syn75)
kappa             transition/transversion ratio (default 2)
omegas, probs     explicit three-class mixture, overriding ``preset``
diversity         high | medium | low, or ``branch_scale`` as a number
target_taxa       two 1-based taxon numbers (``2,5``)
region            1-based inclusive codon range of the converted region (``401,1032``)
convert_fraction  expected converted fraction of variable sites (default 0.25)
seed              master seed

Study keys
----------
study             type_i | power | fpr
replicates        number of simulated datasets
B                 bootstrap replicates per dataset
window_codons, step_codons   scan window and step in codons
window, step      the same in nucleotides (must be divisible by 3)
labels            comma-separated label sets (``all,syn,nonsyn``)
orientation       window statistic sign: misfit (default) | literal
journal           JSON-lines file for resumable runs

Lines starting with ``#`` or ``;`` are comments.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .codon_ctmc import M3Params
from .dss_engine import WindowSpec
from .evolver import (
    DIVERSITY,
    ConfigError,
    Scenario,
    ScenarioConfig,
    default_m3,
    load_fixture_tree,
)
from .ls_tree import read_newick

SCENARIO_KEYS = {"scenario", "tree_a", "tree_b", "lengths", "preset", "kappa", "omegas", "probs",
                 "diversity", "branch_scale", "target_taxa", "region", "convert_fraction", "seed"}
STUDY_KEYS = {"study", "replicates", "B", "window_codons", "step_codons", "window", "step",
              "labels", "journal", "orientation"}
DEFAULT_WINDOW = WindowSpec(200, 10)


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a dict of strings (keys are case-sensitive)."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return dict(cp["config"])


def read_config(path) -> dict:
    return parse_config(Path(path).read_text(), str(path))


def _numbers(key, value, kind=float, count=None):
    try:
        vals = tuple(kind(x) for x in value.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if count is not None and len(vals) != count:
        raise ConfigError(f"{key}: expected {count} values, got {len(vals)}")
    return vals


def _tree(value, base):
    if value.strip().upper() in ("A", "B"):
        return load_fixture_tree(value.strip().upper())
    path = Path(value)
    if not path.is_absolute() and base is not None:
        path = Path(base) / path
    return read_newick(path)


def scenario_config(opts: dict, base_dir=None, scenario=None) -> ScenarioConfig:
    """Build a :class:`ScenarioConfig`; unknown keys raise ``ConfigError``."""
    unknown = set(opts) - SCENARIO_KEYS - STUDY_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    kw = {}
    try:
        kw["scenario"] = Scenario(str(scenario or opts.get("scenario", "null")).strip().lower())
    except ValueError:
        raise ConfigError(f"scenario: unknown value {opts.get('scenario')!r}") from None
    if "tree_a" in opts:
        kw["tree_a"] = _tree(opts["tree_a"], base_dir)
    if "tree_b" in opts:
        kw["tree_b"] = _tree(opts["tree_b"], base_dir)
    if "lengths" in opts:
        kw["lengths"] = _numbers("lengths", opts["lengths"], int)
    kappa = float(opts.get("kappa", 2.0))
    m3 = default_m3(opts.get("preset", "p1"), kappa)
    if "omegas" in opts or "probs" in opts:
        om = _numbers("omegas", opts["omegas"], count=3) if "omegas" in opts else m3.omegas
        pr = _numbers("probs", opts["probs"], count=3) if "probs" in opts else m3.probs
        try:
            m3 = M3Params(kappa, om, pr, m3.pi)
        except ValueError as exc:
            raise ConfigError(f"omegas/probs: {exc}") from None
    kw["m3"] = m3
    if "branch_scale" in opts:
        kw["branch_scale"] = float(opts["branch_scale"])
    elif "diversity" in opts:
        d = opts["diversity"].strip().lower()
        if d not in DIVERSITY:
            raise ConfigError(f"diversity: expected one of {sorted(DIVERSITY)}, got {d!r}")
        kw["branch_scale"] = DIVERSITY[d]
    if "target_taxa" in opts:
        kw["target_taxa"] = _numbers("target_taxa", opts["target_taxa"], int, 2)
    if "region" in opts:
        lo, hi = _numbers("region", opts["region"], int, 2)
        kw["region"] = (lo - 1, hi)
    if "convert_fraction" in opts:
        kw["convert_fraction"] = float(opts["convert_fraction"])
    if "seed" in opts:
        kw["seed"] = int(opts["seed"])
    return ScenarioConfig(**kw)


def window_spec(opts: dict, default: WindowSpec = DEFAULT_WINDOW) -> WindowSpec:
    """Window from ``window``/``step`` (nucleotides) or ``*_codons`` keys."""
    try:
        if "window" in opts or "step" in opts:
            return WindowSpec.from_nucleotides(int(opts.get("window", default.window_codons * 3)),
                                               int(opts.get("step", default.step_codons * 3)))
        return WindowSpec(int(opts.get("window_codons", default.window_codons)),
                          int(opts.get("step_codons", default.step_codons)))
    except ValueError as exc:
        raise ConfigError(f"window: {exc}") from None
