"""Result tables and renderer-agnostic plot data built from a run directory's checkpoints."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter, defaultdict
from pathlib import Path

from .models import Claim, DiversityReport, read_jsonl, write_json
from .stats import bootstrap_ci

REPORT_DIR = "report"
TOP_CLUSTERS = 10


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue(), "utf-8")
    tmp.replace(path)


def _ci(values: list[float], resamples: int, level: float, seed: int):
    if len(values) < 2:
        return None, None
    lo, hi = bootstrap_ci(values, B=resamples, level=level, seed=seed)
    return lo, hi


def _provenance(run_dir: Path) -> dict:
    meta = {}
    for name in ("cluster_meta.json", "jsd_matrix.json"):
        p = run_dir / name
        if p.exists():
            data = json.loads(p.read_text("utf-8"))
            meta = {"run_id": data.get("run_id"), "config_hash": data.get("config_hash")}
            break
    return meta


def emit_report(run_dir, *, run_id: str | None = None, config_hash: str | None = None,
                bootstrap_resamples: int = 1000, bootstrap_level: float = 0.95, seed: int = 0,
                country_of: dict[str, str | None] | None = None) -> dict[str, Path]:
    """Write CSV tables, one plot-data JSON per figure and ``summary.md`` under ``<run_dir>/report``.

    Returns the written paths keyed by figure name. Every file records the
    run id and config hash of the checkpoints it was derived from.
    """
    run_dir = Path(run_dir)
    out = run_dir / REPORT_DIR
    out.mkdir(exist_ok=True)
    prov = _provenance(run_dir)
    prov = {"run_id": run_id or prov.get("run_id") or run_dir.name, "config_hash": config_hash or prov.get("config_hash")}
    written: dict[str, Path] = {}

    reports = read_jsonl(run_dir / "diversity.jsonl", DiversityReport)

    # HSD per (generator, setting, topic), with a generator-level CI over topics
    by_gen: dict[tuple, list[float]] = defaultdict(list)
    for r in reports:
        by_gen[(r.generator_id, r.setting.value)].append(r.hsd)
    gen_ci = {k: _ci(v, bootstrap_resamples, bootstrap_level, seed) for k, v in by_gen.items()}
    hsd_rows = [
        [r.generator_id, r.setting.value, r.topic_id, r.n, r.num_classes, r.coverage, r.rarefied_to_coverage,
         r.hsd, r.hsd_sd, r.hsd_point, *gen_ci[(r.generator_id, r.setting.value)], ";".join(r.flags)]
        for r in reports
    ]
    header = ["generator_id", "setting", "topic_id", "n", "num_classes", "coverage", "rarefied_to_coverage",
              "hsd", "hsd_sd", "hsd_point", "ci_low", "ci_high", "flags"]
    _write_csv(out / "fig2_hsd.csv", header, hsd_rows)
    series = []
    for (gen, setting), values in by_gen.items():
        lo, hi = gen_ci[(gen, setting)]
        series.append({"generator_id": gen, "setting": setting, "mean_hsd": sum(values) / len(values),
                       "ci_low": lo, "ci_high": hi, "topics": len(values)})
    write_json(out / "fig2_hsd.json", {**prov, "figure": "hsd_by_generator", "rows": [dict(zip(header, r)) for r in hsd_rows],
                                       "series": series, "ci_level": bootstrap_level})
    written["fig2"] = out / "fig2_hsd.json"

    # top clusters per cell
    # joint per-topic ids make the histograms comparable across generators
    claims_path, clusters_path = run_dir / "claims.jsonl", run_dir / "clusters.jsonl"
    joint_path = run_dir / "joint_clusters.jsonl"
    source = joint_path if joint_path.exists() and joint_path.stat().st_size else clusters_path
    if claims_path.exists() and source.exists():
        claims = read_jsonl(claims_path, Claim)
        cluster_of = {r["claim_id"]: r["cluster_id"] for r in read_jsonl(source)}
        cells: dict[tuple, Counter] = defaultdict(Counter)
        example: dict[tuple, str] = {}
        for c in claims:
            if c.id not in cluster_of:
                continue
            key = (c.response_ref.generator_id, c.response_ref.setting.value, c.topic_id)
            k = cluster_of[c.id]
            cells[key][k] += 1
            example.setdefault((*key, k), c.text)
        rows, data = [], []
        for key, counts in cells.items():
            top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:TOP_CLUSTERS]
            data.append({"generator_id": key[0], "setting": key[1], "topic_id": key[2],
                         "clusters": [{"cluster_id": k, "count": x, "example": example[(*key, k)]} for k, x in top]})
            rows.extend([*key, rank, k, x, example[(*key, k)]] for rank, (k, x) in enumerate(top, start=1))
        _write_csv(out / "fig3_top_clusters.csv",
                   ["generator_id", "setting", "topic_id", "rank", "cluster_id", "count", "example"], rows)
        write_json(out / "fig3_top_clusters.json", {**prov, "figure": "top_clusters",
                                                    "clustering": "joint" if source == joint_path else "per_cell",
                                                    "cells": data})
        written["fig3"] = out / "fig3_top_clusters.json"

    # JSD heatmap, passed through unchanged
    jsd_path = run_dir / "jsd_matrix.json"
    if jsd_path.exists():
        jsd = json.loads(jsd_path.read_text("utf-8"))
        rows = [[a, b, jsd["matrix"][i][j]] for i, a in enumerate(jsd["sources"]) for j, b in enumerate(jsd["sources"])]
        _write_csv(out / "fig4_jsd.csv", ["source_a", "source_b", "jsd"], rows)
        write_json(out / "fig4_jsd.json", {**prov, "figure": "jsd_heatmap", "labels": jsd["sources"],
                                           "matrix": jsd["matrix"], "per_topic": jsd.get("per_topic", {})})
        written["fig4"] = out / "fig4_jsd.json"

    # per-country bars
    if country_of and any(country_of.values()):
        groups: dict[tuple, list[float]] = defaultdict(list)
        for r in reports:
            country = country_of.get(r.topic_id)
            if country:
                groups[(r.generator_id, r.setting.value, country)].append(r.hsd)
        rows = []
        for i, ((gen, setting, country), values) in enumerate(sorted(groups.items())):
            lo, hi = _ci(values, bootstrap_resamples, bootstrap_level, seed + i)
            rows.append([gen, setting, country, len(values), sum(values) / len(values), lo, hi])
        header = ["generator_id", "setting", "country", "topics", "mean_hsd", "ci_low", "ci_high"]
        _write_csv(out / "fig5_country.csv", header, rows)
        write_json(out / "fig5_country.json", {**prov, "figure": "hsd_by_country",
                                               "bars": [dict(zip(header, r)) for r in rows]})
        written["fig5"] = out / "fig5_country.json"

    # representativeness bars
    rep_path = run_dir / "representativeness.jsonl"
    if rep_path.exists():
        groups = defaultdict(list)
        for r in read_jsonl(rep_path):
            if "Empty" not in r.get("flags", []):
                groups[(r["generator_id"], r["language"])].append(r["hsd"])
        rows = []
        for i, ((gen, lang), values) in enumerate(sorted(groups.items())):
            lo, hi = _ci(values, bootstrap_resamples, bootstrap_level, seed + i)
            rows.append([gen, lang, len(values), sum(values) / len(values), lo, hi])
        header = ["generator_id", "language", "topics", "mean_hsd", "ci_low", "ci_high"]
        _write_csv(out / "fig6_representativeness.csv", header, rows)
        write_json(out / "fig6_representativeness.json", {**prov, "figure": "representativeness",
                                                          "bars": [dict(zip(header, r)) for r in rows]})
        written["fig6"] = out / "fig6_representativeness.json"

    lines = [
        "# Run summary",
        "",
        f"- run id: `{prov['run_id']}`",
        f"- config hash: `{prov['config_hash']}`",
        f"- cells: {len(reports)}",
        "",
        "| generator | setting | topics | mean HSD | CI low | CI high |",
        "|---|---|---|---|---|---|",
    ]
    for s in sorted(series, key=lambda s: (s["generator_id"], s["setting"])):
        fmt = lambda x: "" if x is None else f"{x:.3f}"  # noqa: E731
        lines.append(f"| {s['generator_id']} | {s['setting']} | {s['topics']} | {s['mean_hsd']:.3f} | "
                     f"{fmt(s['ci_low'])} | {fmt(s['ci_high'])} |")
    (out / "summary.md").write_text("\n".join(lines) + "\n", "utf-8")
    written["summary"] = out / "summary.md"
    return written
