import csv
import io
import json

import pytest
from mockrun import CountingFactory, generator, manifest_dict, write_manifest

from epidiv import __version__
from epidiv.backends import BackendUnavailable, make_backend
from epidiv.cli import main
from epidiv.corpus import split_sentences
from epidiv.models import GenerationSetting, ResponseRecord
from epidiv.models import read_jsonl

UNIFORM4 = {"family": "uniform", "classes": 4}
UNIFORM12 = {"family": "uniform", "classes": 12, "class_offset": 1000}


def run(argv, factory=None):
    out = io.StringIO()
    code = main(argv, backend_factory=factory, out=out)
    return code, out.getvalue()


@pytest.fixture
def two_gen(tmp_path):
    data = manifest_dict([generator("a", UNIFORM4), generator("b", UNIFORM12)], topics=3, templates=8)
    path = write_manifest(tmp_path, data)
    return path, tmp_path / "out" / "run"


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_generate_one_record_per_cell(tmp_path):
    path = write_manifest(tmp_path, manifest_dict([generator("a", UNIFORM4)], topics=2, templates=3))
    code, out = run(["generate", "--manifest", str(path)])
    assert code == 0 and "6 written" in out
    records = read_jsonl(tmp_path / "out" / "run" / "responses.jsonl", ResponseRecord)
    assert len(records) == 6
    assert len({(r.topic_id, r.prompt_id) for r in records}) == 6


def test_rerun_generate_is_noop(tmp_path):
    path = write_manifest(tmp_path, manifest_dict([generator("a", UNIFORM4)], topics=1, templates=3))
    assert run(["generate", "--manifest", str(path)])[0] == 0
    before = (tmp_path / "out" / "run" / "responses.jsonl").read_bytes()
    factory = CountingFactory()
    code, out = run(["generate", "--manifest", str(path)], factory)
    assert code == 0 and "0 written, 3 already done" in out
    assert factory.calls("generation") == 0
    assert (tmp_path / "out" / "run" / "responses.jsonl").read_bytes() == before


def test_missing_checkpoint_exit_two(two_gen, capsys):
    path, run_dir = two_gen
    assert run(["generate", "--manifest", str(path)])[0] == 0
    assert run(["decompose", "--manifest", str(path)])[0] == 0
    code, _ = run(["diversity", "--manifest", str(path)])
    assert code == 2 and "clusters.jsonl" in capsys.readouterr().err
    assert (run_dir / "failures.jsonl").exists()


def test_invalid_manifest_exit_two(tmp_path, capsys):
    data = manifest_dict([generator("a", UNIFORM4)])
    data["topics"][1]["id"] = data["topics"][0]["id"]
    code, _ = run(["generate", "--manifest", str(write_manifest(tmp_path, data))])
    assert code == 2 and "DuplicateTopicId" in capsys.readouterr().err


def test_full_run_and_report(two_gen):
    path, run_dir = two_gen
    code, out = run(["run", "--manifest", str(path)])
    assert code == 0, out
    for name in ("responses.jsonl", "claims.jsonl", "clusters.jsonl", "diversity.jsonl", "jsd_matrix.json"):
        assert (run_dir / name).stat().st_size > 0
    assert (run_dir / "failures.jsonl").read_text() == ""

    rows = list(csv.DictReader((run_dir / "report" / "fig2_hsd.csv").open()))
    assert len(rows) == 6
    assert all(r["ci_low"] and r["ci_high"] and float(r["ci_low"]) <= float(r["ci_high"]) for r in rows)
    mean = {g: sum(float(r["hsd"]) for r in rows if r["generator_id"] == g) / 3 for g in "ab"}
    assert mean["b"] > mean["a"]

    top = list(csv.DictReader((run_dir / "report" / "fig3_top_clusters.csv").open()))
    for cell in {(r["generator_id"], r["topic_id"]) for r in top}:
        counts = [int(r["count"]) for r in top if (r["generator_id"], r["topic_id"]) == cell]
        assert len(counts) <= 10 and counts == sorted(counts, reverse=True)
    assert json.loads((run_dir / "report" / "fig3_top_clusters.json").read_text())["clustering"] == "joint"

    jsd = json.loads((run_dir / "jsd_matrix.json").read_text())
    fig4 = json.loads((run_dir / "report" / "fig4_jsd.json").read_text())
    assert fig4["matrix"] == jsd["matrix"] and fig4["labels"] == jsd["sources"]
    m = jsd["matrix"]
    assert all(m[i][i] == 0 and m[i][j] == m[j][i] for i in range(len(m)) for j in range(len(m)))
    for name in ("fig2_hsd.json", "fig3_top_clusters.json", "fig4_jsd.json", "fig5_country.json"):
        data = json.loads((run_dir / "report" / name).read_text())
        assert data["run_id"] == "run" and len(data["config_hash"]) == 64
    assert "run" in (run_dir / "report" / "summary.md").read_text()


def test_resume_after_torn_line(two_gen, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    path, run_dir = two_gen
    assert run(["generate", "--manifest", str(path)])[0] == 0
    responses = run_dir / "responses.jsonl"
    complete = responses.read_bytes()
    lines = complete.splitlines(keepends=True)
    responses.write_bytes(b"".join(lines[:10]) + lines[10][: len(lines[10]) // 2])
    assert run(["generate", "--manifest", str(path)])[0] == 0
    assert responses.read_bytes() == complete


class FailingFactory:
    """Builds mock backends, except that generator ``bad`` is always unavailable."""

    def __call__(self, descriptor):
        backend = make_backend(descriptor)
        if descriptor.endpoint_url == "mock://bad":
            def fail(req):
                raise BackendUnavailable("503 after retries")
            backend._generate = fail
        return backend


def test_failures_exit_one_and_are_recorded(tmp_path):
    path = write_manifest(tmp_path, manifest_dict([generator("a", UNIFORM4), generator("bad", UNIFORM4)],
                                                  topics=1, templates=2))
    code, out = run(["generate", "--manifest", str(path)], FailingFactory())
    assert code == 1 and "2 failed" in out
    failures = read_jsonl(tmp_path / "out" / "run" / "failures.jsonl")
    assert [f["cell"].split("|")[0] for f in failures] == ["bad", "bad"]
    assert all(f["error"] == "BackendUnavailable" for f in failures)
    # the healthy generator's cells are written; a retry with a working backend fills the rest
    assert len(read_jsonl(tmp_path / "out" / "run" / "responses.jsonl")) == 2
    assert run(["generate", "--manifest", str(path)])[0] == 0
    assert len(read_jsonl(tmp_path / "out" / "run" / "responses.jsonl")) == 4


def write_pages(root, topic, n):
    d = root / topic
    d.mkdir(parents=True)
    for i in range(n):
        body = "\n\n".join(f"Paragraph {j} of page {i} says fact {j} [[k{2000 + j}]]. " * 3 for j in range(12))
        (d / f"{i}.txt").write_text(body)
        (d / f"{i}.meta.json").write_text(json.dumps({"url": f"https://site{i}.org/x", "content_type": "text/html"}))


def test_rag_and_search_settings(tmp_path):
    pages = tmp_path / "pages"
    for t in ("t0", "t1"):
        write_pages(pages, t, 3)
    data = manifest_dict([generator("a", UNIFORM4, settings=("IFT", "RAG"))], topics=2, templates=2,
                         search={"pages_dir": "pages", "similarity_floor": "auto"})
    path = write_manifest(tmp_path, data)
    code, out = run(["run", "--manifest", str(path)])
    assert code == 0, out
    run_dir = tmp_path / "out" / "run"
    records = read_jsonl(run_dir / "responses.jsonl", ResponseRecord)
    rag = [r for r in records if r.setting is GenerationSetting.RAG]
    search = [r for r in records if r.setting is GenerationSetting.SEARCH]
    assert len(rag) == 4 and all(r.context_ids for r in rag)
    assert len(search) == 6 and all(r.generator_id == "search" and r.prompt_id is None for r in search)
    for ctx in read_jsonl(run_dir / "rag_contexts.jsonl"):
        assert ctx["token_estimate"] <= 1000
    diversity = read_jsonl(run_dir / "diversity.jsonl")
    assert {d["setting"] for d in diversity} == {"IFT", "RAG", "SEARCH"}
    jsd = json.loads((run_dir / "jsd_matrix.json").read_text())
    assert set(jsd["sources"]) == {"a:IFT", "a:RAG", "search:SEARCH"}


def test_represent_stage(tmp_path):
    refs = tmp_path / "refs" / "t0"
    refs.mkdir(parents=True)
    rows = [{"id": f"r{k}", "topic_id": "t0", "language": "en", "text": f"Reference fact {k} [[k{k}]]."}
            for k in (0, 1, 50)]
    (refs / "en.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    data = manifest_dict([generator("a", UNIFORM4)], topics=1, templates=6, references={"dir": "refs"})
    path = write_manifest(tmp_path, data)
    assert run(["run", "--manifest", str(path)])[0] == 0
    code, out = run(["represent", "--manifest", str(path)])
    assert code == 0, out
    run_dir = tmp_path / "out" / "run"
    matches = read_jsonl(run_dir / "matches.jsonl")
    assert {m["reference_claim_id"] for m in matches} == {"r0", "r1"}
    (row,) = read_jsonl(run_dir / "representativeness.jsonl")
    assert row["language"] == "en" and row["num_classes"] == 2
    code, out = run(["represent", "--manifest", str(path)])
    assert code == 0 and "already done" in out


def test_simulate(tmp_path):
    spec = tmp_path / "pop.json"
    spec.write_text(json.dumps({"family": "uniform", "classes": 5, "n_samples": 200, "seed": 3}))
    code, out = run(["simulate", "--population", str(spec), "--out", str(tmp_path / "sim")])
    assert code == 0 and "200 claims" in out
    truth = json.loads((tmp_path / "sim" / "truth.json").read_text())
    assert truth["true_hsd"] == pytest.approx(5.0)
    claims = read_jsonl(tmp_path / "sim" / "claims.jsonl")
    assert len(claims) == 200 and all(len(split_sentences(c["text"])) == 1 for c in claims)


def test_simulate_bad_spec(tmp_path):
    spec = tmp_path / "pop.json"
    spec.write_text("{not json")
    assert run(["simulate", "--population", str(spec), "--out", str(tmp_path / "sim")])[0] == 2


def test_stage_seed_override(tmp_path):
    path = write_manifest(tmp_path, manifest_dict([generator("a", UNIFORM4)], topics=1, templates=2))
    run(["generate", "--manifest", str(path)])
    first = read_jsonl(tmp_path / "out" / "run" / "responses.jsonl", ResponseRecord)
    (tmp_path / "out" / "run" / "responses.jsonl").unlink()
    run(["generate", "--manifest", str(path), "--stage-seed", "7"])
    second = read_jsonl(tmp_path / "out" / "run" / "responses.jsonl", ResponseRecord)
    assert [r.seed for r in first] != [r.seed for r in second]


def test_worker_count_does_not_change_outputs(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    outputs = []
    for workers in (1, 4):
        d = tmp_path / f"w{workers}"
        d.mkdir()
        data = manifest_dict([generator("a", UNIFORM4), generator("b", UNIFORM12)], topics=2, templates=4,
                             workers=workers)
        assert run(["run", "--manifest", str(write_manifest(d, data))])[0] == 0
        run_dir = d / "out" / "run"
        outputs.append({p.name: p.read_bytes() for p in sorted(run_dir.glob("*.json*"))})
    assert outputs[0] == outputs[1] and outputs[0]["clusters.jsonl"]


@pytest.mark.parametrize("checkpoint,stages", [("claims.jsonl", ("generate", "decompose")),
                                               ("clusters.jsonl", ("generate", "decompose", "cluster")),
                                               ("matches.jsonl", ("run", "represent"))])
def test_progress_entries_must_match_data(tmp_path, monkeypatch, checkpoint, stages):
    # losing rows that a progress record already promised makes the unit redo, not vanish
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    refs = tmp_path / "refs" / "t0"
    refs.mkdir(parents=True)
    refs.joinpath("en.jsonl").write_text("".join(
        json.dumps({"id": f"r{k}", "topic_id": "t0", "language": "en", "text": f"Fact {k} [[k{k}]]."}) + "\n"
        for k in range(4)))
    data = manifest_dict([generator("a", UNIFORM4)], topics=1, templates=4, references={"dir": "refs"})
    path = write_manifest(tmp_path, data)
    for stage in stages:
        assert run([stage, "--manifest", str(path)])[0] == 0
    target = tmp_path / "out" / "run" / checkpoint
    complete = target.read_bytes()
    lines = complete.splitlines(keepends=True)
    target.write_bytes(b"".join(lines[:-2]))
    for stage in stages:
        assert run([stage, "--manifest", str(path)])[0] == 0
    assert target.read_bytes() == complete
