"""``epidiv`` command line.

Exit codes: 0 success, 1 partial failure (see failures.jsonl), 2 configuration
error or missing checkpoint, 130 interrupted.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import SCHEMA_VERSION, __version__
from .backends import make_backend
from .corpus import DecompositionPromptId
from .manifest import ManifestError, RunManifest, load_manifest
from .models import EpidivError, write_json, write_jsonl
from .pipeline import (
    BackendPool,
    MissingCheckpoint,
    StageResult,
    require_inputs,
    run_clustering,
    run_compare,
    run_decomposition,
    run_diversity,
    run_generation,
    run_represent,
)
from .report import emit_report
from .synthetic import PopulationSpec, sample_population, true_hsd

log = logging.getLogger("epidiv")

EPILOG = """exit codes:
  0    success
  1    partial failure; details in <run dir>/failures.jsonl
  2    configuration error or missing prerequisite checkpoint
  130  interrupted; completed records are already on disk, rerun to resume
"""

STAGES = ("generate", "decompose", "cluster", "diversity", "compare", "represent", "report")


def _floor(value: str):
    if value == "auto":
        return value
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'auto' or a number") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epidiv", description="Measure epistemic diversity of text generators.",
                                     epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version",
                        version=f"epidiv {__version__} (checkpoint schema {SCHEMA_VERSION})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, help_):
        p = sub.add_parser(name, help=help_, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--manifest", required=True, type=Path)
        p.add_argument("--stage-seed", type=int, default=None, help="override the run seed for this stage")
        p.add_argument("--resume", action="store_true", help="continue from checkpoints (the default behaviour)")
        return p

    p = stage("generate", "sample responses for every generator, topic, template and setting")
    p.add_argument("--similarity-floor", type=_floor, default=None)
    p = stage("decompose", "split responses into atomic claims")
    p.add_argument("--decomp-prompt", choices=[x.value for x in DecompositionPromptId], default=None)
    stage("cluster", "group claims into meaning classes")
    stage("diversity", "coverage-rarefied Hill-Shannon diversity per cell")
    stage("compare", "Jensen-Shannon divergence between sources")
    stage("represent", "diversity over claims matched to reference corpora")
    stage("report", "write tables and plot data")
    p = stage("run", "generate, decompose, cluster, diversity, compare and report in sequence")
    p.add_argument("--similarity-floor", type=_floor, default=None)
    p.add_argument("--decomp-prompt", choices=[x.value for x in DecompositionPromptId], default=None)

    p = sub.add_parser("simulate", help="write a synthetic claims.jsonl with known ground truth",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--population", required=True, type=Path, help="JSON population spec")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--topic", default="synthetic")
    p.add_argument("--stage-seed", type=int, default=None)
    return parser


def _print_result(stage: str, result: StageResult, out) -> None:
    print(f"{stage}: {result.written} written, {result.skipped} already done, {len(result.failures)} failed", file=out)
    if result.summary:
        print(f"{'generator':<16} {'setting':<7} {'topic':<20} {'n':>6} {'coverage':>9} {'hsd':>9}", file=out)
        for gen, setting, topic, n, cov, value in result.summary:
            print(f"{gen:<16} {setting:<7} {topic:<20} {n:>6} {cov:>9.4f} {value:>9.4f}", file=out)


def _run_stage(stage: str, manifest: RunManifest, pool: BackendPool, args) -> StageResult:
    if stage == "generate":
        return run_generation(manifest, pool, similarity_floor=getattr(args, "similarity_floor", None))
    if stage == "decompose":
        prompt = getattr(args, "decomp_prompt", None)
        return run_decomposition(manifest, pool, DecompositionPromptId(prompt) if prompt else None)
    if stage == "cluster":
        return run_clustering(manifest, pool)
    if stage == "diversity":
        return run_diversity(manifest)
    if stage == "compare":
        return run_compare(manifest, pool)
    if stage == "represent":
        return run_represent(manifest, pool)
    require_inputs(manifest.run_dir, "report")
    paths = emit_report(manifest.run_dir, run_id=manifest.run_id, config_hash=manifest.config_hash,
                        bootstrap_resamples=manifest.bootstrap_resamples, bootstrap_level=manifest.bootstrap_level,
                        seed=manifest.seed, country_of={t.id: t.country for t in manifest.topics})
    return StageResult(written=len(paths))


def _simulate(args, out) -> int:
    try:
        spec = PopulationSpec.from_dict(json.loads(args.population.read_text("utf-8")))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: bad population spec {args.population}: {exc}", file=sys.stderr)
        return 2
    if args.stage_seed is not None:
        spec = dataclasses.replace(spec, seed=args.stage_seed)
    claims, dist = sample_population(spec, args.topic)
    args.out.mkdir(parents=True, exist_ok=True)
    write_jsonl(args.out / "claims.jsonl", claims)
    write_json(args.out / "truth.json", {"population": dataclasses.asdict(spec), "distribution": dist.tolist(),
                                         "true_hsd": true_hsd(dist), "n_samples": len(claims)})
    print(f"simulate: {len(claims)} claims, true HSD {true_hsd(dist):.4f}", file=out)
    return 0


def main(argv=None, backend_factory=None, out=None) -> int:
    """Entry point; ``backend_factory`` replaces backend construction (used by tests)."""
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate":
        return _simulate(args, out)
    try:
        manifest = load_manifest(args.manifest)
    except FileNotFoundError:
        print(f"error: manifest not found: {args.manifest}", file=sys.stderr)
        return 2
    except ManifestError as exc:
        for v in exc.violations:
            print(f"error: {args.manifest}: {v}", file=sys.stderr)
        return 2
    if args.stage_seed is not None:
        manifest = dataclasses.replace(manifest, seed=args.stage_seed)

    pool = BackendPool(backend_factory or make_backend)
    stages = ("generate", "decompose", "cluster", "diversity", "compare", "report") if args.command == "run" \
        else (args.command,)
    failed = False
    try:
        for stage in stages:
            result = _run_stage(stage, manifest, pool, args)
            _print_result(stage, result, out)
            failed |= bool(result.failures)
    except MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EpidivError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted; checkpoints hold all completed records, rerun to resume", file=sys.stderr)
        return 130
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
