import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from coadapt.cli import DEFAULT_CONFIG, load_config, main

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full default-flag pipeline: gen-data, train-source, colearn."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    assert main(["gen-data", "--out-dir", str(data)]) == 0
    model = root / "source.cfmd"
    assert main(["train-source", "--data", str(data), "--out", str(model)]) == 0
    metrics = root / "metrics.jsonl"
    adapted = root / "adapted.cfmd"
    rc = main([
        "colearn", "--model", str(model), "--bank", str(data / "bank.cfbk"),
        "--data", str(data / "target.cfds"), "--metrics", str(metrics),
        "--out", str(adapted), "--truth", str(data / "truth.csv"),
    ])
    assert rc == 0
    return root


class TestConfig:
    def test_defaults_when_no_file(self):
        assert load_config(None) == DEFAULT_CONFIG

    def test_unknown_top_level_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"bogus": {}}')
        assert main(["gen-data", "--config", str(p), "--out-dir",
                     str(tmp_path / "o")]) == 2

    def test_unknown_section_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"colearn": {"gama": 0.5}}')
        assert main(["gen-data", "--config", str(p), "--out-dir",
                     str(tmp_path / "o")]) == 2

    def test_missing_config_exits_2_with_path(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        rc = main(["gen-data", "--config", str(missing), "--out-dir",
                   str(tmp_path / "o")])
        assert rc == 2
        assert str(missing) in capsys.readouterr().err

    def test_override_merges(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"colearn": {"gamma": 0.1}, "seed": 3}')
        cfg = load_config(p)
        assert cfg["colearn"]["gamma"] == 0.1
        assert cfg["seed"] == 3
        assert cfg["colearn"]["episodes"] == 15


class TestGenData:
    def test_same_config_same_checksums(self, tmp_path, capsys):
        main(["gen-data", "--out-dir", str(tmp_path / "a")])
        out_a = capsys.readouterr().out
        main(["gen-data", "--out-dir", str(tmp_path / "b")])
        out_b = capsys.readouterr().out
        sums_a = sorted(l.split("sha256=")[1] for l in out_a.splitlines()
                        if "sha256=" in l)
        sums_b = sorted(l.split("sha256=")[1] for l in out_b.splitlines()
                        if "sha256=" in l)
        assert sums_a == sums_b

    def test_prints_seed(self, tmp_path, capsys):
        main(["gen-data", "--out-dir", str(tmp_path / "x"), "--seed", "21"])
        out = capsys.readouterr().out
        assert "seed=21" in out


class TestColearn:
    def test_single_episode_single_metrics_line(self, pipeline, tmp_path):
        data = pipeline / "data"
        metrics = tmp_path / "m.jsonl"
        rc = main([
            "colearn", "--model", str(pipeline / "source.cfmd"),
            "--bank", str(data / "bank.cfbk"),
            "--data", str(data / "target.cfds"),
            "--metrics", str(metrics), "--out", str(tmp_path / "a.cfmd"),
            "--episodes", "1",
        ])
        assert rc == 0
        lines = metrics.read_text().strip().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["episode"] == 1

    def test_gamma_one_equals_match_scheme(self, pipeline, tmp_path):
        data = pipeline / "data"
        outs = {}
        for name, flags in (
            ("g1", ["--gamma", "1.0", "--scheme", "match-or-conf"]),
            ("match", ["--scheme", "match"]),
        ):
            metrics = tmp_path / f"{name}.jsonl"
            rc = main([
                "colearn", "--model", str(pipeline / "source.cfmd"),
                "--bank", str(data / "bank.cfbk"),
                "--data", str(data / "target.cfds"),
                "--metrics", str(metrics), "--out", str(tmp_path / f"{name}.cfmd"),
                "--episodes", "3", "--truth", str(data / "truth.csv"), *flags,
            ])
            assert rc == 0
            outs[name] = metrics.read_text()
        assert outs["g1"] == outs["match"]

    def test_determinism_byte_identical_outputs(self, pipeline, tmp_path):
        data = pipeline / "data"
        products = []
        for name in ("r1", "r2"):
            metrics = tmp_path / f"{name}.jsonl"
            out = tmp_path / f"{name}.cfmd"
            rc = main([
                "colearn", "--model", str(pipeline / "source.cfmd"),
                "--bank", str(data / "bank.cfbk"),
                "--data", str(data / "target.cfds"),
                "--metrics", str(metrics), "--out", str(out),
                "--truth", str(data / "truth.csv"),
            ])
            assert rc == 0
            products.append((metrics.read_bytes(), out.read_bytes()))
        assert products[0] == products[1]

    def test_malformed_bank_exits_3(self, pipeline, tmp_path, capsys):
        bad = tmp_path / "bad.cfbk"
        bad.write_bytes(b"WHAT" + bytes(32))
        rc = main([
            "colearn", "--model", str(pipeline / "source.cfmd"),
            "--bank", str(bad),
            "--data", str(pipeline / "data" / "target.cfds"),
            "--metrics", str(tmp_path / "m.jsonl"),
            "--out", str(tmp_path / "o.cfmd"),
        ])
        assert rc == 3
        assert "magic" in capsys.readouterr().err


class TestEvalAndOracle:
    def test_adaptation_improves_eval_accuracy(self, pipeline, tmp_path, capsys):
        data = pipeline / "data"
        accs = {}
        for name, model in (("before", "source.cfmd"), ("after", "adapted.cfmd")):
            rc = main([
                "eval", "--model", str(pipeline / model),
                "--data", str(data / "target.cfds"),
                "--truth", str(data / "truth.csv"),
            ])
            assert rc == 0
            accs[name] = json.loads(capsys.readouterr().out)["accuracy"]
        assert accs["after"] >= accs["before"]

    def test_oracle_on_separable_bank(self, tmp_path, capsys):
        import coadapt as ca

        truth = np.array([0] * 5 + [1] * 5)
        feats = np.eye(2)[truth] * 3.0 + 0.01
        ca.save_bank(ca.FeatureBank(feats), tmp_path / "b.cfbk")
        ca.data.save_truth_csv(truth, tmp_path / "t.csv")
        rc = main(["oracle", "--bank", str(tmp_path / "b.cfbk"),
                   "--truth", str(tmp_path / "t.csv")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "bank oracle accuracy: 1.0000" in out

    def test_oracle_ratio_output(self, pipeline, capsys):
        data = pipeline / "data"
        rc = main([
            "oracle", "--bank", str(data / "bank.cfbk"),
            "--model", str(pipeline / "source.cfmd"),
            "--data", str(data / "target.cfds"),
            "--truth", str(data / "truth.csv"),
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "target-compatibility ratio:" in out

    def test_oracle_requires_some_input(self, pipeline):
        rc = main(["oracle", "--truth",
                   str(pipeline / "data" / "truth.csv")])
        assert rc == 2

    def test_oracle_model_features_file(self, pipeline, tmp_path, capsys):
        import coadapt as ca

        data = pipeline / "data"
        model = ca.load_model(pipeline / "source.cfmd")
        target = ca.load_dataset(data / "target.cfds")
        feats, _, _ = ca.forward_batch(model, target.inputs)
        feats_file = tmp_path / "features.cfbk"
        ca.save_bank(ca.FeatureBank(feats.astype(np.float32).astype(np.float64)),
                     feats_file)
        rc = main([
            "oracle", "--bank", str(data / "bank.cfbk"),
            "--model-features", str(feats_file),
            "--truth", str(data / "truth.csv"),
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "source-feature oracle accuracy:" in out
        assert "target-compatibility ratio:" in out


class TestReport:
    def test_writes_figures_and_csv(self, pipeline, tmp_path, capsys):
        data = pipeline / "data"
        eval_json = tmp_path / "eval.json"
        rc = main([
            "eval", "--model", str(pipeline / "adapted.cfmd"),
            "--data", str(data / "target.cfds"),
            "--truth", str(data / "truth.csv"),
            "--out", str(eval_json),
        ])
        assert rc == 0
        capsys.readouterr()
        out = tmp_path / "report"
        rc = main(["report", "--metrics", str(pipeline / "metrics.jsonl"),
                   "--eval", str(eval_json), "--out-dir", str(out)])
        assert rc == 0
        for name in ("curves.png", "curves.csv", "confusion.png",
                     "confusion.csv", "confidence.png"):
            assert (out / name).exists(), name
        header = (out / "curves.csv").read_text().splitlines()[0]
        assert header.startswith("episode,pseudolabel_proportion")

    def test_metrics_only(self, pipeline, tmp_path):
        out = tmp_path / "r"
        rc = main(["report", "--metrics", str(pipeline / "metrics.jsonl"),
                   "--out-dir", str(out)])
        assert rc == 0
        assert (out / "curves.png").exists()
        assert not (out / "confusion.png").exists()


class TestHelp:
    def test_help_lists_every_colearn_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["colearn", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--scheme", "--gamma", "--episodes", "--lr",
                     "--decay-episode", "--centroid-subset",
                     "--centroid-iters", "--temperature", "--seed"):
            assert flag in text
        assert "default 0.5" in text  # the documented threshold default

    def test_missing_files_exit_3(self, tmp_path):
        rc = main(["eval", "--model", str(tmp_path / "none.cfmd"),
                   "--data", str(tmp_path / "none.cfds"),
                   "--truth", str(tmp_path / "none.csv")])
        assert rc == 3


class TestDivergence:
    def test_diverging_source_training_exits_4(self, pipeline, tmp_path, capsys):
        import warnings

        cfg = tmp_path / "boom.json"
        cfg.write_text(json.dumps({"source": {"lr": 1e6}}))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rc = main(["train-source", "--config", str(cfg),
                       "--data", str(pipeline / "data"),
                       "--out", str(tmp_path / "m.cfmd")])
        assert rc == 4
        assert "diverged" in capsys.readouterr().err


class TestReferenceFixture:
    def test_default_flags_reproduce_committed_metrics(self, pipeline):
        fixture = FIXTURES / "reference_metrics.jsonl"
        produced = (pipeline / "metrics.jsonl").read_bytes()
        assert produced == fixture.read_bytes()
