"""Integration tests for CLI commands."""

import csv
from pathlib import Path

import pytest
from typer.testing import CliRunner

from ltpeft import app

runner = CliRunner()

TINY_CONFIG = """\
classes = 4
n_max = 12
imbalance = 6.0
val_per_class = 3
source_per_class = 6
image = 8
patch = 4
layers = 2
dim = 8
heads = 2
prompt_length = 2
adapter_dim = 4
pool_size = 3
top_k = 2
batch_size = 4
lr = 0.05
warmup_epochs = 0
epochs = 1
pretrain_epochs = 1
pretrain_batch_size = 8
moe_hidden = 8
moe_epochs = 2
moe_batch_size = 4
expert2_dim = 8
knn_k = 3
eval_batch_size = 8
"""


def _rows(path: Path) -> list[dict[str, str]]:
    with path.open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def workspace(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    """A directory holding ``run.toml`` and the generated datasets."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("LTPEFT_THREADS", raising=False)
    (tmp_path / "run.toml").write_text(TINY_CONFIG, encoding="utf-8")
    result = runner.invoke(app, ["gen-data", "-c", "run.toml"])
    assert result.exit_code == 0, result.output
    return tmp_path


def _invoke(*args: str) -> None:
    result = runner.invoke(app, list(args))
    assert result.exit_code == 0, result.output


class TestBasics:
    """Commands that need no trained state."""

    @staticmethod
    def test_help_lists_config_keys():
        """Help carries the key registry."""
        result = runner.invoke(app, ["--help"])
        assert result.exit_code == 0
        assert "lambda_minus" in result.stdout

    def test_config_prints_document(self, tmp_path: Path) -> None:
        path = tmp_path / "run.toml"
        path.write_text("classes = 7\n", encoding="utf-8")
        result = runner.invoke(app, ["config", "-c", str(path)])
        assert result.exit_code == 0
        assert "classes = 7" in result.stdout

    def test_config_writes_file(self, tmp_path: Path) -> None:
        out = tmp_path / "nested" / "full.toml"
        result = runner.invoke(app, ["config", "-o", str(out)])
        assert result.exit_code == 0
        assert "pool_size = 20" in out.read_text(encoding="utf-8")

    def test_unknown_key_exits_2(self, tmp_path: Path) -> None:
        path = tmp_path / "bad.toml"
        path.write_text("classes = 4\nlearning_rate = 0.1\n", encoding="utf-8")
        result = runner.invoke(app, ["config", "-c", str(path)])
        assert result.exit_code == 2
        assert "line 2" in result.stdout

    def test_gen_data_writes_three_files(self, workspace: Path) -> None:
        names = sorted(p.name for p in (workspace / "data").iterdir())
        assert names == ["source.ltds", "target-train.ltds", "target-val.ltds"]

    def test_pretrain_without_data_exits_3(self, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.chdir(tmp_path)
        result = runner.invoke(app, ["pretrain", "-o", "runs"])
        assert result.exit_code == 3
        assert "gen-data" in result.stdout


class TestStageOrder:
    """Stages refuse to run before their inputs exist."""

    def test_phase1_without_backbone(self, workspace: Path) -> None:
        result = runner.invoke(app, ["phase1", "-c", "run.toml", "-o", "runs/e1"])
        assert result.exit_code == 3
        assert "pretrain" in result.stdout

    def test_phase2_without_phase1(self, workspace: Path) -> None:
        _invoke("pretrain", "-c", "run.toml", "-o", "runs/e1")
        result = runner.invoke(app, ["phase2", "-c", "run.toml", "-o", "runs/e1"])
        assert result.exit_code == 3
        assert "phase1" in result.stdout

    def test_resume_without_checkpoint(self, workspace: Path) -> None:
        _invoke("pretrain", "-c", "run.toml", "-o", "runs/e1")
        result = runner.invoke(app, ["phase1", "-c", "run.toml", "-o", "runs/e1", "--resume"])
        assert result.exit_code == 3

    def test_bad_split(self, workspace: Path) -> None:
        result = runner.invoke(
            app, ["export-scores", "-c", "run.toml", "--ckpt", "x.ltck", "--split", "test", "-o", "s.csv"]
        )
        assert result.exit_code == 2


class TestPipeline:
    """The full two-expert pipeline on a tiny benchmark."""

    def test_end_to_end(self, workspace: Path) -> None:
        for expert, out in (("1", "runs/e1"), ("2", "runs/e2")):
            _invoke("pretrain", "-c", "run.toml", "-o", out, "-e", expert)
            _invoke("phase1", "-c", "run.toml", "-o", out, "-e", expert)
            _invoke("phase2", "-c", "run.toml", "-o", out, "-e", expert)

        e1 = workspace / "runs" / "e1"
        for name in ("backbone.ltck", "phase1.ltck", "phase2.ltck", "phase2-metrics.csv", "ltpeft.log"):
            assert (e1 / name).is_file(), name
        history = _rows(e1 / "phase2-metrics.csv")
        assert [row["epoch"] for row in history] == ["1"]

        _invoke("phase3", "-c", "run.toml", "--vo", "runs/e1", "--vl", "runs/e2", "-o", "runs/moe")
        assert (workspace / "runs" / "moe" / "moe.ltck").is_file()
        assert len(_rows(workspace / "runs" / "moe" / "phase3-metrics.csv")) <= 2

        _invoke(
            "eval",
            "-c",
            "run.toml",
            "--ckpt",
            "runs/e1/phase2.ltck",
            "--ckpt2",
            "runs/e2/phase2.ltck",
            "--moe",
            "runs/moe/moe.ltck",
            "-o",
            "reports",
        )
        models = [row["model"] for row in _rows(workspace / "reports" / "eval.csv")]
        assert models == ["phase2", "expert2", "w_base", "moe"]
        per_class = _rows(workspace / "reports" / "eval-per-class.csv")
        assert len(per_class) == 4 * 4

        _invoke("analyze", "-c", "run.toml", "--ckpt", "runs/e1/phase2.ltck", "-o", "reports")
        features = [row["features"] for row in _rows(workspace / "reports" / "analyze.csv")]
        assert features == ["frozen", "phase1", "phase2"]

        _invoke("export-scores", "-c", "run.toml", "--ckpt", "runs/e1/phase2.ltck", "-o", "scores.csv")
        scores = _rows(workspace / "scores.csv")
        assert len(scores) == 4 * 3
        assert list(scores[0]) == ["sample_id", "label", "s_0", "s_1", "s_2", "s_3"]

    def test_eval_frozen_backbone(self, workspace: Path) -> None:
        _invoke("pretrain", "-c", "run.toml", "-o", "runs/e1")
        _invoke("eval", "-c", "run.toml", "--ckpt", "runs/e1/backbone.ltck")
        rows = _rows(workspace / "runs" / "e1" / "eval.csv")
        assert [row["model"] for row in rows] == ["frozen"]

    def test_moe_needs_second_expert(self, workspace: Path) -> None:
        _invoke("pretrain", "-c", "run.toml", "-o", "runs/e1")
        _invoke("phase1", "-c", "run.toml", "-o", "runs/e1")
        result = runner.invoke(
            app, ["eval", "-c", "run.toml", "--ckpt", "runs/e1/phase1.ltck", "--moe", "runs/moe/moe.ltck"]
        )
        assert result.exit_code == 3

    def test_until_epoch_then_resume(self, workspace: Path) -> None:
        config = workspace / "run.toml"
        config.write_text(TINY_CONFIG.replace("epochs = 1\n", "epochs = 2\n", 1), encoding="utf-8")
        _invoke("pretrain", "-c", "run.toml", "-o", "runs/e1")
        _invoke("phase1", "-c", "run.toml", "-o", "runs/e1", "--until-epoch", "1")
        assert len(_rows(workspace / "runs" / "e1" / "phase1-metrics.csv")) == 1
        _invoke("phase1", "-c", "run.toml", "-o", "runs/e1", "--resume")
        assert [row["epoch"] for row in _rows(workspace / "runs" / "e1" / "phase1-metrics.csv")] == ["1", "2"]

    def test_joint(self, workspace: Path) -> None:
        _invoke("pretrain", "-c", "run.toml", "-o", "runs/j")
        _invoke("joint", "-c", "run.toml", "-o", "runs/j")
        assert len(_rows(workspace / "runs" / "j" / "joint-metrics.csv")) == 2


class TestImportedScores:
    """Mixture fitting and evaluation from exported score CSVs."""

    @pytest.fixture
    def exported(self, workspace: Path) -> Path:
        _invoke("pretrain", "-c", "run.toml", "-o", "runs/e1")
        _invoke("phase1", "-c", "run.toml", "-o", "runs/e1")
        _invoke("phase2", "-c", "run.toml", "-o", "runs/e1")
        for index, stage in (("1", "phase1"), ("2", "phase2")):
            for split in ("train", "val"):
                _invoke(
                    "export-scores",
                    "-c",
                    "run.toml",
                    "--ckpt",
                    f"runs/e1/{stage}.ltck",
                    "--split",
                    split,
                    "-o",
                    f"s{index}-{split}.csv",
                )
        return workspace

    def test_phase3_and_eval_from_csv(self, exported: Path) -> None:
        _invoke("phase3", "-c", "run.toml", "--scores1", "s1-train.csv", "--scores2", "s2-train.csv", "-o", "runs/csv")
        assert (exported / "runs" / "csv" / "moe.ltck").is_file()
        _invoke(
            "eval",
            "-c",
            "run.toml",
            "--moe",
            "runs/csv/moe.ltck",
            "--scores1",
            "s1-val.csv",
            "--scores2",
            "s2-val.csv",
            "-o",
            "reports-csv",
        )
        models = [row["model"] for row in _rows(exported / "reports-csv" / "eval.csv")]
        assert models == ["expert1", "expert2", "w_base", "moe"]

    def test_one_table_exits_3(self, exported: Path) -> None:
        result = runner.invoke(app, ["phase3", "-c", "run.toml", "--scores1", "s1-train.csv", "-o", "runs/csv"])
        assert result.exit_code == 3
        assert "together" in result.stdout

    def test_label_mismatch_exits_1(self, exported: Path) -> None:
        rows = _rows(exported / "s2-train.csv")
        rows[0]["label"] = str((int(rows[0]["label"]) + 1) % 4)
        with (exported / "s2-train.csv").open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        result = runner.invoke(
            app, ["phase3", "-c", "run.toml", "--scores1", "s1-train.csv", "--scores2", "s2-train.csv", "-o", "runs/csv"]
        )
        assert result.exit_code == 1
        assert "labels" in result.stdout

    def test_mixed_sources_exit_2(self, exported: Path) -> None:
        result = runner.invoke(
            app,
            [
                "phase3",
                "-c",
                "run.toml",
                "--vo",
                "runs/e1",
                "--scores1",
                "s1-train.csv",
                "--scores2",
                "s2-train.csv",
                "-o",
                "runs/csv",
            ],
        )
        assert result.exit_code == 2


class TestRepeatability:
    """Repeated commands write identical bytes."""

    def test_gen_data_twice(self, workspace: Path) -> None:
        _invoke("gen-data", "-c", "run.toml", "-o", "again")
        for name in ("source.ltds", "target-train.ltds", "target-val.ltds"):
            assert (workspace / "again" / name).read_bytes() == (workspace / "data" / name).read_bytes(), name

    def test_eval_twice(self, workspace: Path) -> None:
        _invoke("pretrain", "-c", "run.toml", "-o", "runs/e1")
        _invoke("phase1", "-c", "run.toml", "-o", "runs/e1")
        for out in ("first", "second"):
            _invoke("eval", "-c", "run.toml", "--ckpt", "runs/e1/phase1.ltck", "-o", out)
        for name in ("eval.csv", "eval-per-class.csv"):
            assert (workspace / "first" / name).read_bytes() == (workspace / "second" / name).read_bytes(), name
