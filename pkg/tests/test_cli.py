import json

import pytest

from faithlab.cli import EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from faithlab.runconfig import RunConfig, load_config, parse_config_text, stream_seed

WORLD = ["--n_famous", "40", "--n_background", "100", "--n_relations", "8", "--seed", "3"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["gen", "--out_dir", str(d), *WORLD]) == EXIT_OK
    assert main(["train", "--out_dir", str(d), *WORLD, "--train_epochs", "150"]) == EXIT_OK
    return d


class TestConfig:
    def test_comments_and_blank_lines(self):
        vals = parse_config_text("# header\n\nmethod = ga   # inline\nlr=0.01\n")
        assert vals == {"method": "ga", "lr": "0.01"}

    def test_unknown_key(self):
        with pytest.raises(Exception, match="bogus"):
            parse_config_text("bogus = 1\n")

    def test_duplicate_key_names_line(self):
        with pytest.raises(Exception, match=":2"):
            parse_config_text("lr = 0.1\nlr = 0.2\n", "cfg.txt")

    def test_overrides_beat_file(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("method = ga\nneuron_ratio = 0.1\n")
        cfg = load_config(p, {"method": "npo"})
        assert cfg.unlearn_config().method == "npo" and cfg.unlearn_config().neuron_ratio == 0.1

    def test_named_seed_streams_are_distinct_and_stable(self):
        seeds = RunConfig().seeds
        assert len(set(seeds.values())) == len(seeds)
        assert stream_seed(0, "world") == stream_seed(0, "world") != stream_seed(1, "world")


class TestCommands:
    def test_gen_outputs(self, workdir):
        for name in ("dataset.jsonl", "vocab.json", "splits.json", "config_gen.txt"):
            assert (workdir / name).exists()

    def test_gen_byte_identical(self, workdir, tmp_path):
        assert main(["gen", "--out_dir", str(tmp_path), *WORLD]) == EXIT_OK
        assert (tmp_path / "dataset.jsonl").read_bytes() == (workdir / "dataset.jsonl").read_bytes()

    def test_manifest(self, workdir):
        man = json.loads((workdir / "manifest.json").read_text())
        assert {"gen", "train"} <= set(man["runs"])
        train = man["runs"]["train"]
        assert train["converged"] and train["base_accuracy"] >= 95.0
        assert set(train["seeds"]) == {"root", "world", "model", "unlearn", "eval"}
        assert "numpy" in train["versions"] and train["config"]["n_famous"] == 40

    def test_unlearn_and_eval(self, workdir, capsys):
        out = workdir / "ga"
        args = ["--out_dir", str(out), "--dataset", str(workdir / "dataset.jsonl"),
                "--checkpoint", str(workdir / "model.npz"), "--method", "ga", "--lr", "0.005"]
        assert main(["unlearn", *args]) == EXIT_OK
        assert "Score=" in capsys.readouterr().out
        for name in ("report.jsonl", "report.csv", "report_verdicts.csv", "report_history.jsonl", "unlearned.npz"):
            assert (out / name).exists()
        ev = ["--out_dir", str(out), "--dataset", str(workdir / "dataset.jsonl"),
              "--checkpoint", str(out / "unlearned.npz"), "--baseline_checkpoint", str(workdir / "model.npz")]
        assert main(["eval", *ev]) == EXIT_OK
        rec = [json.loads(l) for l in (out / "eval.jsonl").read_text().splitlines()]
        assert any(r.get("record") == "verdict" for r in rec)

    def test_sweep(self, workdir):
        out = workdir / "sweep"
        args = ["--out_dir", str(out), "--dataset", str(workdir / "dataset.jsonl"),
                "--checkpoint", str(workdir / "model.npz"), "--sweep_key", "lr", "--sweep_values", "0.3,0.5",
                "--max_epochs", "3"]
        assert main(["sweep", *args]) == EXIT_OK
        rows = [json.loads(l) for l in (out / "sweep.jsonl").read_text().splitlines()]
        assert [r["value"] for r in rows] == [0.3, 0.5]
        assert len((out / "sweep.csv").read_text().splitlines()) == 3


class TestExitCodes:
    def test_unknown_key_is_config_error(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("colour = blue\n")
        assert main(["gen", "--config", str(p), "--out_dir", str(tmp_path)]) == EXIT_CONFIG

    def test_bad_value_is_config_error(self, tmp_path):
        assert main(["gen", "--out_dir", str(tmp_path), "--n_relations", "0"]) == EXIT_CONFIG

    def test_missing_dataset_is_data_error(self, tmp_path):
        assert main(["train", "--out_dir", str(tmp_path)]) == EXIT_DATA

    def test_truncated_dataset_is_data_error(self, workdir, tmp_path):
        lines = (workdir / "dataset.jsonl").read_text().splitlines()
        (tmp_path / "dataset.jsonl").write_text("\n".join(lines[:10]) + "\n")
        assert main(["train", "--out_dir", str(tmp_path)]) == EXIT_DATA

    def test_training_budget_exhausted(self, workdir, tmp_path):
        args = ["--out_dir", str(tmp_path), "--dataset", str(workdir / "dataset.jsonl"), "--train_epochs", "1"]
        assert main(["train", *args]) == EXIT_CONVERGENCE
        assert json.loads((tmp_path / "manifest.json").read_text())["runs"]["train"]["converged"] is False

    def test_divergent_unlearning_is_numeric_error(self, workdir, tmp_path):
        args = ["--out_dir", str(tmp_path), "--dataset", str(workdir / "dataset.jsonl"),
                "--checkpoint", str(workdir / "model.npz"), "--method", "ga", "--lr", "1e12",
                "--ua_stop_threshold", "0", "--max_epochs", "20"]
        assert main(["unlearn", *args]) == EXIT_NUMERIC
        assert json.loads((tmp_path / "manifest.json").read_text())["runs"]["unlearn"]["aborted"]
