import json
import subprocess
import sys
import zlib
from pathlib import Path

import numpy as np
import pytest

from wsnas.cli import main
from wsnas.distance import SimilarityMatrix
from wsnas.genotype import Genotype, parse_dot_edges
from wsnas.progressive import TransferArchitecture

from table2 import table2_csv_text


def run(args, capsys=None):
    code = main(args)
    if capsys is None:
        return code, "", ""
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def gen_task(tmp_path, name="task.wsnb", family="stripes", seed=0, n=24, classes=2,
             size=8, extra=()):
    out = tmp_path / name
    code = main([
        "taskgen", "--family", family, "--seed", str(seed), "--n", str(n),
        "--classes", str(classes), "--size", str(size), "--out", str(out), *extra,
    ])
    assert code == 0
    return out


class TestTaskgenCommand:
    def test_writes_bundle_and_provenance(self, tmp_path, capsys):
        out = gen_task(tmp_path)
        assert out.exists()
        assert (tmp_path / "task.wsnb.meta.json").exists()
        prov = json.loads((tmp_path / "task.wsnb.prov.json").read_text())
        assert prov["command"].startswith("wsnas taskgen")
        assert prov["seed"] == 0

    def test_force_reruns_are_checksum_identical(self, tmp_path):
        out = gen_task(tmp_path)
        first = zlib.crc32(out.read_bytes())
        out2 = gen_task(tmp_path, extra=("--force",))
        assert zlib.crc32(out2.read_bytes()) == first

    def test_refuses_silent_overwrite(self, tmp_path, capsys):
        gen_task(tmp_path)
        code, _, err = run([
            "taskgen", "--family", "stripes", "--seed", "0", "--n", "24",
            "--classes", "2", "--out", str(tmp_path / "task.wsnb"),
        ], capsys)
        assert code == 1
        assert "--force" in json.loads(err)["error"]

    def test_missing_out_is_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["taskgen", "--family", "stripes", "--seed", "0", "--n", "8",
                  "--classes", "2"])
        assert excinfo.value.code == 2

    def test_n_too_small_is_runtime_error_with_json(self, tmp_path, capsys):
        code, _, err = run([
            "taskgen", "--family", "stripes", "--seed", "0", "--n", "3",
            "--classes", "4", "--out", str(tmp_path / "t.wsnb"),
        ], capsys)
        assert code == 1
        assert "n too small" in json.loads(err)["error"]


class TestTasCommand:
    def test_stage_plan_controls_final_width(self, tmp_path, capsys):
        task = gen_task(tmp_path)
        prefix = tmp_path / "tas" / "run"
        code, out, _ = run([
            "tas", "--task", str(task), "--stages", "2:8:1,3:3:1", "--seed", "0",
            "--channels", "4", "--out", str(prefix),
        ], capsys)
        assert code == 0
        transfer = TransferArchitecture.load(f"{prefix}.lambda.wsta")
        assert transfer.edge_width() == 3
        trained = TransferArchitecture.load(f"{prefix}.lambda-hat.wsta")
        assert trained.has_params

    def test_report_matches_documented_schema(self, tmp_path, capsys):
        task = gen_task(tmp_path)
        prefix = tmp_path / "run"
        code, _, _ = run([
            "tas", "--task", str(task), "--stages", "2:2:1", "--seed", "0",
            "--channels", "4", "--out", str(prefix),
        ], capsys)
        assert code == 0
        payload = json.loads(Path(f"{prefix}.report.json").read_text())
        assert set(payload) == {"stages", "total_op_evals", "total_wall_seconds"}
        for stage in payload["stages"]:
            assert set(stage) == {
                "epochs", "op_evals", "wall_seconds", "final_train_loss", "final_val_acc",
            }

    def test_multiple_tasks_require_meta(self, tmp_path, capsys):
        a = gen_task(tmp_path, "a.wsnb", seed=1)
        b = gen_task(tmp_path, "b.wsnb", seed=2)
        code, _, err = run([
            "tas", "--task", str(a), "--task", str(b), "--stages", "2:2:1",
            "--out", str(tmp_path / "x"),
        ], capsys)
        assert code == 1
        assert "--meta" in json.loads(err)["error"]

    def test_meta_with_single_task_behaves_as_single(self, tmp_path, capsys):
        task = gen_task(tmp_path)
        single = tmp_path / "single"
        meta = tmp_path / "meta"
        for prefix, extra in ((single, []), (meta, ["--meta"])):
            code, _, _ = run([
                "tas", "--task", str(task), "--stages", "2:2:1", "--seed", "0",
                "--channels", "4", "--out", str(prefix), *extra,
            ], capsys)
            assert code == 0
        lam_s = TransferArchitecture.load(f"{single}.lambda.wsta")
        lam_m = TransferArchitecture.load(f"{meta}.lambda.wsta")
        assert lam_s.normal.edges == lam_m.normal.edges


@pytest.fixture(scope="module")
def study_with_embeddings(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    tasks = []
    for seed, family in ((1, "stripes"), (2, "stripes"), (1, "blobs")):
        out = root / f"{family}-{seed}.wsnb"
        assert main([
            "taskgen", "--family", family, "--seed", str(seed), "--n", "24",
            "--classes", "2", "--size", "16", "--out", str(out),
        ]) == 0
        tasks.append(out)
    study = root / "study"
    for task in tasks:
        assert main([
            "embed", "--task", str(task), "--study", str(study),
            "--head-epochs", "5", "--mc-draws", "2",
        ]) == 0
    return study, tasks


class TestEmbedAndSimilarity:
    def test_embeddings_share_probe_checksum(self, study_with_embeddings):
        study, _ = study_with_embeddings
        sidecars = sorted(Path(study / "archive").glob("*.emb.meta.json"))
        assert len(sidecars) == 3
        checksums = {json.loads(p.read_text())["probe_checksum"] for p in sidecars}
        assert len(checksums) == 1

    def test_similarity_csv_is_symmetric(self, study_with_embeddings, capsys):
        study, _ = study_with_embeddings
        code, _, _ = run(["similarity", "--study", str(study), "--force"], capsys)
        assert code == 0
        matrix = SimilarityMatrix.load_csv(study / "matrices" / "similarity.csv")
        np.testing.assert_array_equal(matrix.values, matrix.values.T)
        assert np.diag(matrix.values).max() == 0.0

    def test_duplicate_task_listed_twice_has_zero_distance(self, study_with_embeddings,
                                                           tmp_path, capsys):
        study, tasks = study_with_embeddings
        twin = tmp_path / "twin.emb"
        src = study / "archive" / "stripes-s1.emb"
        code, _, _ = run([
            "embed", "--task", str(tasks[0]), "--study", str(study),
            "--head-epochs", "5", "--mc-draws", "2", "--out", str(twin), "--force",
        ], capsys)
        assert code == 0
        # patch the copy's task id so both can share one matrix
        meta_path = Path(str(twin) + ".meta.json")
        meta = json.loads(meta_path.read_text())
        meta["task_id"] = "stripes-s1-copy"
        meta_path.write_text(json.dumps(meta))
        out_csv = tmp_path / "twin.csv"
        code, _, _ = run([
            "similarity", "--study", str(study), "--emb", str(src),
            "--emb", str(twin), "--out", str(out_csv),
        ], capsys)
        assert code == 0
        matrix = SimilarityMatrix.load_csv(out_csv)
        assert matrix.values[0, 1] == 0.0


class TestSelectCommand:
    def test_table2_csv_selects_flower_for_aircraft(self, tmp_path, capsys):
        csv_path = tmp_path / "table2.csv"
        csv_path.write_text(table2_csv_text())
        code, out, _ = run(["select", "--matrix", str(csv_path), "--task", "aircraft"],
                           capsys)
        assert code == 0
        assert "flower" in out and "0.019000" in out
        code, out, _ = run(["select", "--matrix", str(csv_path), "--task", "birds"],
                           capsys)
        assert code == 0
        assert "flower" in out and "0.017000" in out

    def test_unknown_task_errors(self, tmp_path, capsys):
        csv_path = tmp_path / "table2.csv"
        csv_path.write_text(table2_csv_text())
        code, _, err = run(["select", "--matrix", str(csv_path), "--task", "cars"], capsys)
        assert code == 1
        assert "cars" in json.loads(err)["error"]


@pytest.fixture(scope="module")
def transfer_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    task = root / "task.wsnb"
    assert main([
        "taskgen", "--family", "stripes", "--seed", "3", "--n", "24",
        "--classes", "2", "--size", "8", "--out", str(task),
    ]) == 0
    prefix = root / "tas"
    assert main([
        "tas", "--task", str(task), "--stages", "2:8:1,3:3:1", "--seed", "0",
        "--channels", "4", "--out", str(prefix),
    ]) == 0
    return task, Path(f"{prefix}.lambda.wsta"), Path(f"{prefix}.lambda-hat.wsta"), Path(
        f"{prefix}.report.json"
    )


class TestWarmstartCommand:
    def test_lambda_and_lambda_hat_genotypes_are_subgraphs(self, transfer_files,
                                                           tmp_path, capsys):
        from wsnas.genotype import is_subgraph_of

        task, lam, lam_hat, _ = transfer_files
        for mode, source in (("lambda", lam), ("lambda_hat", lam_hat)):
            prefix = tmp_path / mode
            code, _, _ = run([
                "warmstart", "--task", str(task), "--transfer", str(source),
                "--mode", mode, "--epochs", "1", "--warmup", "0",
                "--out", str(prefix), "--seed", "0",
            ], capsys)
            assert code == 0
            genotype = Genotype.from_json(Path(f"{prefix}.genotype.json").read_text())
            transfer = TransferArchitecture.load(source)
            assert is_subgraph_of(genotype, transfer.normal, transfer.reduce)

    def test_savings_emitted_against_baseline_report(self, transfer_files, tmp_path,
                                                     capsys):
        task, lam, _, report = transfer_files
        prefix = tmp_path / "sav"
        code, _, _ = run([
            "warmstart", "--task", str(task), "--transfer", str(lam),
            "--epochs", "1", "--warmup", "0", "--out", str(prefix),
            "--baseline-report", str(report),
        ], capsys)
        assert code == 0
        savings = json.loads(Path(f"{prefix}.savings.json").read_text())
        assert set(savings) == {"op_eval_reduction", "wall_reduction"}
        assert savings["op_eval_reduction"] > 0

    def test_sweep_records_every_branch(self, transfer_files, tmp_path, capsys):
        task, lam, _, _ = transfer_files
        prefix = tmp_path / "sweep"
        code, _, _ = run([
            "warmstart", "--task", str(task), "--transfer", str(lam),
            "--epochs", "1", "--warmup", "0", "--sweep", "0.0,0.5",
            "--retrain-epochs", "1", "--out", str(prefix),
        ], capsys)
        assert code == 0
        payload = json.loads(Path(f"{prefix}.report.json").read_text())
        assert len(payload["sweep"]) == 2
        assert payload["best_dropout0"] in (0.0, 0.5)

    def test_width_flag_guards_transfer_width(self, transfer_files, tmp_path, capsys):
        task, lam, _, _ = transfer_files
        code, _, err = run([
            "warmstart", "--task", str(task), "--transfer", str(lam),
            "--width", "5", "--epochs", "1", "--warmup", "0",
            "--out", str(tmp_path / "w"),
        ], capsys)
        assert code == 1
        assert "ops per edge" in json.loads(err)["error"]


class TestEvalCommand:
    def test_zero_epoch_eval_reports_chance_accuracy(self, transfer_files, tmp_path,
                                                     capsys):
        task, lam, _, _ = transfer_files
        prefix = tmp_path / "g"
        assert run([
            "warmstart", "--task", str(task), "--transfer", str(lam),
            "--epochs", "1", "--warmup", "0", "--out", str(prefix),
        ], capsys)[0] == 0
        out_json = tmp_path / "eval.json"
        code, out, _ = run([
            "eval", "--task", str(task), "--genotype", f"{prefix}.genotype.json",
            "--epochs", "0", "--cells", "2", "--channels", "4",
            "--out", str(out_json),
        ], capsys)
        assert code == 0
        payload = json.loads(out_json.read_text())
        # untrained logits equal the zero bias: accuracy within a wide
        # binomial band around 1/classes
        assert 0.0 <= payload["validation_accuracy"] <= 0.9


class TestExportDotCommand:
    def test_genotype_dot_is_syntactically_valid(self, transfer_files, tmp_path, capsys):
        task, lam, _, _ = transfer_files
        prefix = tmp_path / "g"
        assert run([
            "warmstart", "--task", str(task), "--transfer", str(lam),
            "--epochs", "1", "--warmup", "0", "--out", str(prefix),
        ], capsys)[0] == 0
        dot_path = tmp_path / "cell.dot"
        code, _, _ = run([
            "export-dot", "--genotype", f"{prefix}.genotype.json",
            "--kind", "normal", "--out", str(dot_path),
        ], capsys)
        assert code == 0
        text = dot_path.read_text()
        _check_dot_grammar(text)
        assert len(parse_dot_edges(text)) == 8

    def test_transfer_dot_lists_admissible_ops(self, transfer_files, tmp_path, capsys):
        _, lam, _, _ = transfer_files
        dot_path = tmp_path / "space.dot"
        code, _, _ = run([
            "export-dot", "--transfer", str(lam), "--kind", "normal",
            "--out", str(dot_path),
        ], capsys)
        assert code == 0
        text = dot_path.read_text()
        _check_dot_grammar(text)
        assert len(parse_dot_edges(text)) == 14 * 3

    def test_requires_exactly_one_source(self, tmp_path, capsys):
        code, _, err = run(["export-dot", "--out", str(tmp_path / "x.dot")], capsys)
        assert code == 1
        assert "exactly one" in json.loads(err)["error"]


def _check_dot_grammar(text):
    """Minimal DOT grammar check: digraph block with node/edge statements."""
    lines = [line.strip() for line in text.strip().splitlines()]
    assert lines[0].startswith("digraph ") and lines[0].endswith("{")
    assert lines[-1] == "}"
    import re

    node_re = re.compile(r'^"[^"]+";$')
    edge_re = re.compile(r'^"[^"]+" -> "[^"]+"( \[label="[^"]+"\])?;$')
    attr_re = re.compile(r"^(rankdir=|node \[).*;$")
    for line in lines[1:-1]:
        assert node_re.match(line) or edge_re.match(line) or attr_re.match(line), line


def test_console_script_entry_point_runs():
    result = subprocess.run(
        [sys.executable, "-m", "wsnas.cli", "--help"], capture_output=True, text=True
    )
    assert result.returncode == 0
    assert "warmstart" in result.stdout
