import json

import pytest

from aspectral.cli import EXIT_INPUT, EXIT_OK, EXIT_USAGE, run

TINY = """\
dtype = "float64"
encoder.hidden = 16
encoder.layers = 2
encoder.heads = 2
encoder.ff_dim = 32
encoder.max_len = 16
encoder.dropout = 0.0
item_max_len = 16
query_max_len = 8
pretrain.epochs = 1
pretrain.batch_size = 32
finetune.epochs = 2
finetune.batch_size = 8
finetune.eval_every = 1
finetune.select_k = 10
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert run(["gen-data", "--seed", "2", "--out", str(root / "data"), "--items", "120", "--train", "24",
                "--dev", "8", "--test", "8", "-q"]) == EXIT_OK
    d = root / "data"
    assert run(["pretrain", "--config", str(root / "tiny.cfg"), "--corpus", str(d / "corpus.jsonl"),
                "--out", str(root / "pre"), "-q"]) == EXIT_OK
    assert run(["finetune", "--checkpoint", str(root / "pre" / "ckpt" / "epoch-001.ckpt"),
                "--corpus", str(d / "corpus.jsonl"), "--queries", str(d / "queries.jsonl"),
                "--qrels", str(d / "qrels.tsv"), "--out", str(root / "ft"), "-q"]) == EXIT_OK
    return root


def data_args(root):
    d = root / "data"
    return ["--corpus", str(d / "corpus.jsonl"), "--queries", str(d / "queries.jsonl"), "--qrels", str(d / "qrels.tsv")]


class TestPipeline:
    def test_outputs_exist(self, workspace):
        assert (workspace / "pre" / "log.jsonl").read_text().count("\n") > 0
        assert (workspace / "ft" / "best.ckpt").exists()

    def test_eval_reports_four_metrics(self, workspace, capsys):
        capsys.readouterr()
        code = run(["eval", "--checkpoint", str(workspace / "ft" / "best.ckpt"), *data_args(workspace),
                    "--format", "jsonl", "--out", str(workspace / "ev"), "-q"])
        assert code == EXIT_OK
        rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert {(r["metric"], r["K"]) for r in rows} == {("R", 100), ("R", 500), ("NDCG", 10), ("NDCG", 50)}
        assert (workspace / "ev" / "run.trec").exists()

    def test_eval_is_byte_identical(self, workspace, tmp_path):
        args = ["eval", "--checkpoint", str(workspace / "ft" / "best.ckpt"), *data_args(workspace), "-q"]
        run(args + ["--out", str(tmp_path / "a")])
        run(args + ["--out", str(tmp_path / "b")])
        for name in ("metrics.txt", "metrics.jsonl", "run.trec"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_eval_against_baseline_run(self, workspace, capsys):
        args = ["eval", "--checkpoint", str(workspace / "ft" / "best.ckpt"), *data_args(workspace), "-q"]
        run(args + ["--out", str(workspace / "base")])
        capsys.readouterr()
        assert run(args + ["--baseline-run", str(workspace / "base" / "run.trec"), "--format", "jsonl"]) == EXIT_OK
        rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert all(r["p_vs_baseline"] == 1.0 for r in rows)  # identical rankings

    def test_search_prints_ranked_items_with_weights(self, workspace, capsys):
        capsys.readouterr()
        code = run(["search", "--checkpoint", str(workspace / "ft" / "best.ckpt"),
                    "--corpus", str(workspace / "data" / "corpus.jsonl"), "-k", "3", "some query", "-q"])
        lines = capsys.readouterr().out.splitlines()
        assert code == EXIT_OK and lines[0].startswith("query weights:") and len(lines) == 4
        assert [line.split("\t")[0] for line in lines[1:]] == ["1", "2", "3"]

    def test_override_changes_config(self, workspace, capsys):
        capsys.readouterr()
        code = run(["finetune", "--checkpoint", str(workspace / "pre" / "ckpt" / "epoch-001.ckpt"),
                    *data_args(workspace), "--out", str(workspace / "ft2"), "--finetune.epochs", "1",
                    "--finetune.select_k=5", "-q"])
        assert code == EXIT_OK
        assert "dev_R@5" in json.loads(capsys.readouterr().out)


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert run(["gradcheck", "--bogus", "1"]) == EXIT_USAGE
        assert "usage:" in capsys.readouterr().err

    def test_no_command(self):
        assert run([]) == EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path):
        code = run(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--corpus", "c", "--queries", "q",
                    "--qrels", "r", "-q"])
        assert code == EXIT_INPUT

    def test_bad_corpus(self, workspace, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        assert run(["pretrain", "--config", str(workspace / "tiny.cfg"), "--corpus", str(bad),
                    "--out", str(tmp_path / "o"), "-q"]) == EXIT_INPUT

    def test_bad_config_value(self, workspace, tmp_path):
        assert run(["pretrain", "--corpus", str(workspace / "data" / "corpus.jsonl"), "--out", str(tmp_path),
                    "--mlm_ratio", "2.0", "-q"]) == EXIT_INPUT

    def test_gradcheck_passes(self, capsys):
        assert run(["gradcheck", "-q"]) == EXIT_OK
        assert capsys.readouterr().out.startswith("max rel err ")


class TestAblate:
    def test_row_count_matches_grid(self, workspace, tmp_path, capsys):
        (tmp_path / "grid.cfg").write_text('grid.weighting = ["cls_gating", "presence"]\n'
                                           'grid.fusion_objects = ["other", "cls", "none"]\nseeds = [0]\n')
        capsys.readouterr()
        code = run(["ablate", "--config", str(workspace / "tiny.cfg"), "--matrix", str(tmp_path / "grid.cfg"),
                    *data_args(workspace), "--out", str(tmp_path / "out"), "-q"])
        assert code == EXIT_OK
        rows = (tmp_path / "out" / "ablation.jsonl").read_text().splitlines()
        assert len(rows) == 2 * 3
        assert all(json.loads(r)["status"] == "ok" for r in rows)
