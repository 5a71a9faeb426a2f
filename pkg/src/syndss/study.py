"""Simulation studies: Type-I error, power and convergence false positives.

Each replicate simulates one scenario alignment, runs the full bootstrap
test on it and records the p-value of every label set.  Replicates are
journaled as JSON lines so an interrupted study resumes where it stopped.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .codon_ctmc import LabelSet
from .dss_engine import WindowSpec
from .evolver import RngStream, Scenario, ScenarioConfig, simulate_scenario
from .null_boot import ALPHA, bootstrap

log = logging.getLogger(__name__)

TABLE_HEADER = ["scenario", "label", "replicates", "rejections", "rate", "ci_low", "ci_high"]


class StudyKind(enum.Enum):
    TYPE_I = "type_i"
    POWER = "power"
    FPR = "fpr"

    @classmethod
    def parse(cls, value) -> StudyKind:
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower().replace("-", "_"))

    @property
    def scenario(self) -> Scenario:
        return {StudyKind.TYPE_I: Scenario.NULL, StudyKind.POWER: Scenario.RECOMBINATION,
                StudyKind.FPR: Scenario.CONVERGENT}[self]


def replicate_seed(master_seed: int, index: int) -> int:
    """64-bit bootstrap seed for study replicate ``index``."""
    state = np.random.SeedSequence(master_seed, spawn_key=(index, 1)).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def wald_interval(rate: float, n: int, level: float = 0.95) -> tuple:
    """Binomial-variance interval ``rate +- t * sqrt(rate (1 - rate) / n)``, clipped to [0, 1]."""
    if n < 2:
        return 0.0, 1.0
    half = stats.t.ppf(0.5 + level / 2, n - 1) * math.sqrt(rate * (1 - rate) / n)
    return max(0.0, rate - half), min(1.0, rate + half)


def paired_less(reject_a, reject_b) -> float:
    """One-sided exact test that label b rejects less often than label a.

    Uses the discordant pairs only: under equal rates each is equally
    likely to favour either label (exact McNemar).
    """
    a = np.asarray(reject_a, dtype=bool)
    b = np.asarray(reject_b, dtype=bool)
    only_a = int(np.count_nonzero(a & ~b))
    only_b = int(np.count_nonzero(b & ~a))
    if only_a + only_b == 0:
        return 1.0
    return float(stats.binomtest(only_b, only_a + only_b, 0.5, alternative="less").pvalue)


@dataclass
class StudyResult:
    kind: StudyKind
    labels: list
    records: list = field(default_factory=list)  # one dict per replicate, by index
    alpha: float = ALPHA

    @property
    def completed(self) -> list:
        return [r for r in self.records if r.get("error") is None]

    @property
    def failures(self) -> int:
        return len(self.records) - len(self.completed)

    def rejections(self, label) -> np.ndarray:
        lab = LabelSet.parse(label).value
        return np.array([r["p_values"][lab] < self.alpha for r in self.completed], dtype=bool)

    def rate(self, label) -> float:
        rej = self.rejections(label)
        return float(rej.mean()) if rej.size else math.nan

    def table(self) -> list:
        rows = []
        for lab in self.labels:
            rej = self.rejections(lab)
            n = int(rej.size)
            rate = float(rej.mean()) if n else math.nan
            lo, hi = wald_interval(rate, n) if n else (math.nan, math.nan)
            rows.append([self.kind.value, lab.value, n, int(rej.sum()), rate, lo, hi])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for row in self.table():
            w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in row])
        return buf.getvalue()


def _load_journal(path):
    done = {}
    if path is not None and Path(path).exists():
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                done[rec["replicate"]] = rec
    return done


def run_study(
    kind,
    replicates: int,
    B: int,
    cfg: ScenarioConfig,
    spec: WindowSpec,
    labels=(LabelSet.ALL, LabelSet.SYN, LabelSet.NONSYN),
    threads: int = 1,
    journal=None,
    orientation: str = "misfit",
) -> StudyResult:
    """Run (or resume) a simulation study and return per-replicate p-values.

    Parameters
    ----------
    kind : StudyKind or str
        Fixes the simulated scenario: null, recombination or convergence.
    cfg : ScenarioConfig
        Scenario settings; its ``scenario`` field is overridden by ``kind``
        and its ``seed`` is the study's master seed.
    journal : path, optional
        JSON-lines file; replicates already present are not rerun.
    orientation : {"misfit", "literal"}
        Window statistic sign, see :mod:`syndss.dss_engine`.

    Notes
    -----
    Replicate ``i`` simulates from substream ``(seed, i)`` and bootstraps
    with :func:`replicate_seed`, so results do not depend on ``threads``,
    on interruptions or on the order replicates are run.  A replicate that
    raises is logged, journaled with its error and left out of the rates.
    """
    kind = StudyKind.parse(kind)
    labels = [LabelSet.parse(x) for x in labels]
    if cfg.scenario is not kind.scenario:
        cfg = cfg.with_(scenario=kind.scenario)
    done = _load_journal(journal)
    out = open(journal, "a") if journal is not None else None
    try:
        for i in range(replicates):
            if i in done:
                continue
            t0 = time.perf_counter()
            rec = {"replicate": i}
            try:
                aln = simulate_scenario(cfg, RngStream(cfg.seed, (i,)))
                res = bootstrap(aln, spec, labels, B, replicate_seed(cfg.seed, i), threads,
                                orientation=orientation)
                rec["p_values"] = {lab.value: res.p_values[lab] for lab in labels}
                rec["observed"] = {lab.value: res.observed[lab] for lab in labels}
                rec["error"] = None
            except Exception as exc:  # noqa: BLE001 - one bad replicate must not end a study
                log.warning("replicate %d failed: %s: %s", i, type(exc).__name__, exc)
                rec["error"] = f"{type(exc).__name__}: {exc}"
            log.info("replicate %d/%d done in %.1fs: %s", i + 1, replicates,
                     time.perf_counter() - t0, rec.get("p_values", rec["error"]))
            done[i] = rec
            if out is not None:
                out.write(json.dumps(rec, sort_keys=True) + "\n")
                out.flush()
    finally:
        if out is not None:
            out.close()
    records = [done[i] for i in range(replicates)]
    return StudyResult(kind, labels, records)
