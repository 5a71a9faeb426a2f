"""Command-line interface: ``syndss {scan,test,simulate,study,replay}``.

Exit status is 0 on success, 1 for usage errors, 2 for data errors
(unreadable or invalid input, bad configuration) and 3 for numerical
failures.  Every command writes ``manifest.json`` next to its outputs;
``syndss replay manifest.json`` reruns it with identical results.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import secrets
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .codon_ctmc import LabelSet
from .config import DEFAULT_WINDOW, read_config, scenario_config, window_spec
from .dss_engine import AllWindowsDegenerate, WindowSpec, WindowTooLong, scan_labels, scan_model
from .evolver import ConfigError, RngStream, Scenario, simulate_scenario
from .ls_tree import NewickError, SingularDesign, TooFewTaxa
from .m3_fit import NonFinite, TipMismatch
from .null_boot import ALPHA, bootstrap, fit_null
from .pairwise_dist import NoComparableSites
from .seqio import AlignmentError, read_alignment, to_fasta
from .study import StudyKind, run_study

log = logging.getLogger("syndss")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
DATA_ERRORS = (AlignmentError, ConfigError, NewickError, TipMismatch, TooFewTaxa, WindowTooLong,
               NoComparableSites, AllWindowsDegenerate, OSError, ValueError)
NUMERICAL_ERRORS = (NonFinite, SingularDesign, FloatingPointError, np.linalg.LinAlgError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def decision(p_values: dict, alpha: float = ALPHA) -> str | None:
    """Advisory reading of the per-label p-values.

    Significant ALL and SYN statistics point to recombination; a
    significant ALL or NONSYN statistic without SYN support points to
    convergent evolution.
    """
    if LabelSet.ALL not in p_values or LabelSet.SYN not in p_values:
        return None
    sig = {lab: p < alpha for lab, p in p_values.items()}
    if sig[LabelSet.ALL] and sig[LabelSet.SYN]:
        return "recombination-consistent"
    if (sig[LabelSet.ALL] or sig.get(LabelSet.NONSYN, False)) and not sig[LabelSet.SYN]:
        return "convergence-consistent"
    return "no signal"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _manifest(args, argv, inputs, seed=None, **params):
    argv = list(argv)
    if seed is not None and not any(a == "--seed" or a.startswith("--seed=") for a in argv):
        argv += ["--seed", str(seed)]  # replay must not draw a fresh seed
    return {
        "command": args.command,
        "argv": argv,
        "parameters": params,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "seed": seed,
        "version": __version__,
        "wall_clock_seconds": round(time.perf_counter() - args._t0, 3),
    }


def _spec_from_args(args) -> WindowSpec:
    if args.window is not None and args.window_codons is not None:
        raise UsageError("give --window or --window-codons, not both")
    if args.step is not None and args.step_codons is not None:
        raise UsageError("give --step or --step-codons, not both")
    for flag, val in (("--window", args.window), ("--step", args.step)):
        if val is not None and val % 3:
            raise UsageError(f"{flag} {val} is not divisible by 3 (sizes are in nucleotides)")
    win = args.window // 3 if args.window is not None else args.window_codons
    step = args.step // 3 if args.step is not None else args.step_codons
    win = DEFAULT_WINDOW.window_codons if win is None else win
    step = DEFAULT_WINDOW.step_codons if step is None else step
    try:
        return WindowSpec(win, step)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _labels_from_args(args) -> list:
    try:
        return [LabelSet.parse(x) for x in args.labels.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--labels: expected a subset of all,syn,nonsyn, got {args.labels!r}") from None


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbits(63)
        log.warning("no --seed given; using %d", args.seed)
    return args.seed


def _load(args):
    try:
        return read_alignment(args.alignment, format=args.format)
    except AlignmentError as exc:
        raise AlignmentError(f"{args.alignment}: {exc}") from None


def cmd_scan(args, argv):
    spec, labels = _spec_from_args(args), _labels_from_args(args)
    aln = _load(args)
    if args.kappa is not None and args.omega is not None:
        kappa, omega = args.kappa, args.omega
    else:
        _, params = fit_null(aln)
        kappa = params.kappa if args.kappa is None else args.kappa
        omega = params.mean_omega if args.omega is None else args.omega
    lands = scan_labels(aln, spec, labels, scan_model(aln, kappa, omega),
                        orientation=args.orientation)
    out = Path(args.out)
    for lab, land in lands.items():
        _write(out / f"landscape_{lab.value}.csv", land.to_csv())
    summary = {
        "alignment": str(args.alignment), "n_taxa": aln.n_taxa, "n_codons": aln.n_codons,
        "window_codons": spec.window_codons, "step_codons": spec.step_codons,
        "kappa": kappa, "omega": omega, "orientation": args.orientation,
        "labels": {lab.value: land.summary() for lab, land in lands.items()},
    }
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    man = _manifest(args, argv, [args.alignment], window_codons=spec.window_codons,
                    step_codons=spec.step_codons, labels=[x.value for x in labels],
                    kappa=kappa, omega=omega)
    _write(out / "manifest.json", json.dumps(man, indent=2, sort_keys=True) + "\n")
    for lab, land in lands.items():
        b = land.best_window
        print(f"{lab.value}: dss_max={b.dss:.6g} at codons {b.start + 1}-{b.end}")


def cmd_test(args, argv):
    spec, labels = _spec_from_args(args), _labels_from_args(args)
    if args.B < 1:
        raise UsageError("--B must be at least 1")
    seed = _seed(args)
    aln = _load(args)
    res = bootstrap(aln, spec, labels, args.B, seed, args.threads,
                    orientation=args.orientation)
    out = Path(args.out)
    for lab in labels:
        _write(out / f"landscape_{lab.value}.csv", res.landscapes[lab].to_csv(res.threshold_95[lab]))
    payload = res.to_dict()
    payload.update(
        alignment=str(args.alignment), window_codons=spec.window_codons,
        step_codons=spec.step_codons, alpha=ALPHA, decision=decision(res.p_values),
        orientation=args.orientation,
    )
    for lab in labels:
        payload["labels"][lab.value]["window"] = res.landscapes[lab].summary()["window"]
    _write(out / "result.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    man = _manifest(args, argv, [args.alignment], seed=seed, window_codons=spec.window_codons,
                    step_codons=spec.step_codons, labels=[x.value for x in labels], B=args.B,
                    threads=args.threads)
    _write(out / "manifest.json", json.dumps(man, indent=2, sort_keys=True) + "\n")
    for lab in labels:
        print(f"{lab.value}: dss_max={res.observed[lab]:.6g} p={res.p_values[lab]:.4g} "
              f"threshold_95={res.threshold_95[lab]:.6g}")
    print(f"decision: {payload['decision']}")


def cmd_simulate(args, argv):
    opts = read_config(args.config)
    if args.seed is not None:
        opts["seed"] = str(args.seed)
    elif "seed" not in opts:
        opts["seed"] = str(_seed(args))
    cfg = scenario_config(opts, Path(args.config).parent)
    out = Path(args.out)
    width = max(3, len(str(args.replicates)))
    files = []
    for i in range(args.replicates):
        aln = simulate_scenario(cfg, RngStream(cfg.seed, (i,)))
        name = f"replicate_{i + 1:0{width}d}.fasta"
        _write(out / name, to_fasta(aln))
        files.append({"file": name, "replicate": i, "stream": [cfg.seed, i]})
    extra = {}
    if cfg.scenario is Scenario.RECOMBINATION:
        extra["breakpoint_codon"] = cfg.lengths[0]
    if cfg.scenario is Scenario.CONVERGENT:
        extra["region"] = [cfg.region[0] + 1, cfg.region[1]]
        extra["target_taxa"] = list(cfg.target_taxa)
    man = _manifest(args, argv, [args.config], seed=cfg.seed, scenario=cfg.scenario.value,
                    n_codons=cfg.n_codons, lengths=list(cfg.lengths), branch_scale=cfg.branch_scale,
                    replicates=args.replicates, files=files, **extra)
    _write(out / "manifest.json", json.dumps(man, indent=2, sort_keys=True) + "\n")


def cmd_study(args, argv):
    opts = read_config(args.config)
    if "study" not in opts:
        raise ConfigError("study: missing (type_i, power or fpr)")
    try:
        kind = StudyKind.parse(opts["study"])
    except ValueError:
        raise ConfigError(f"study: unknown kind {opts['study']!r}") from None
    if args.seed is not None:
        opts["seed"] = str(args.seed)
    elif "seed" not in opts:
        opts["seed"] = str(_seed(args))
    cfg = scenario_config(opts, Path(args.config).parent, scenario=kind.scenario.value)
    spec = window_spec(opts)
    labels = [LabelSet.parse(x) for x in opts.get("labels", "all,syn,nonsyn").split(",")]
    replicates = int(opts.get("replicates", 100))
    B = int(opts.get("B", 100))
    orientation = opts.get("orientation", "misfit").strip().lower()
    if orientation not in ("misfit", "literal"):
        raise ConfigError(f"orientation: expected misfit or literal, got {orientation!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    journal = Path(opts["journal"]) if "journal" in opts else out / "journal.jsonl"
    res = run_study(kind, replicates, B, cfg, spec, labels, args.threads, journal, orientation)
    _write(out / "study.csv", res.to_csv())
    man = _manifest(args, argv, [args.config], seed=cfg.seed, study=kind.value,
                    replicates=replicates, B=B, window_codons=spec.window_codons,
                    step_codons=spec.step_codons, orientation=orientation,
                    failures=res.failures)
    _write(out / "manifest.json", json.dumps(man, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(res.to_csv())
    if res.failures:
        log.warning("%d replicate(s) failed and were excluded", res.failures)


def cmd_replay(args, argv):
    man = json.loads(Path(args.manifest).read_text())
    replay = list(man["argv"])
    if args.out is not None:
        replay = _replace_out(replay, args.out)
    return main(replay)


def _replace_out(argv, out):
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            argv[i + 1] = out
            return argv
        if a.startswith("--out="):
            argv[i] = f"--out={out}"
            return argv
    return argv + ["--out", out]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="syndss", description="Labeled-substitution Dss scans for recombination "
                "and convergent evolution in codon alignments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def scan_flags(sp):
        sp.add_argument("alignment")
        sp.add_argument("--format", choices=["fasta", "phylip"], default=None,
                        help="alignment format (default: guessed from contents)")
        sp.add_argument("--window", type=int, help="window size in nucleotides")
        sp.add_argument("--step", type=int, help="step size in nucleotides")
        sp.add_argument("--window-codons", type=int, help="window size in codons")
        sp.add_argument("--step-codons", type=int, help="step size in codons")
        sp.add_argument("--labels", default="all,syn,nonsyn")
        sp.add_argument("--orientation", choices=["misfit", "literal"], default="misfit",
                        help="window statistic SSb - SSa (misfit, default) or SSa - SSb")
        sp.add_argument("--out", default=".")

    sp = sub.add_parser("scan", help="Dss landscapes per label set")
    scan_flags(sp)
    sp.add_argument("--kappa", type=float, help="skip the model fit and use this kappa")
    sp.add_argument("--omega", type=float, help="skip the model fit and use this omega")

    sp = sub.add_parser("test", help="scan plus parametric bootstrap p-values")
    scan_flags(sp)
    sp.add_argument("--B", type=int, default=500)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("simulate", help="simulate scenario alignments from a config file")
    sp.add_argument("config")
    sp.add_argument("--replicates", type=int, default=1)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default=".")

    sp = sub.add_parser("study", help="Type-I, power or false-positive study")
    sp.add_argument("config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", default=".")

    sp = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", default=None)
    return p


COMMANDS = {"scan": cmd_scan, "test": cmd_test, "simulate": cmd_simulate, "study": cmd_study,
            "replay": cmd_replay}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args._t0 = t0
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            rc = COMMANDS[args.command](args, argv)
        return EXIT_OK if rc is None else rc
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DATA_ERRORS as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
