import json
import subprocess
import sys

import numpy as np
import pytest

from mstex.cli import ConfigError, build_parser, main, resolve_config
from mstex.imageio import MultispectralImage, export_multispectral, load_multispectral
from mstex.metrics import BAND_KEYS, SCALAR_KEYS
from mstex.synthetic import correlated_field, low_rank_corpus

NET = ["--network", "vgg19-compact"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    export_multispectral(correlated_field(64, 64, 5, seed=1), d / "ex.tif")
    for i, img in enumerate(low_rank_corpus(2, 40, 40, 6, seed=2)):
        export_multispectral(MultispectralImage(np.clip(img.data, 0, 1)), d / "lr" / f"lr{i}.tif")
    return d


def _help(*args):
    return subprocess.run([sys.executable, "-m", "mstex", *args, "--help"], capture_output=True, text=True).stdout


def test_help_documents_defaults():
    text = " ".join(_help("synthesize").split())
    for snippet in ("iterations=500", "batch_size=10 triplets", "history_size=20", "max_evals=20",
                    "(default: 500)", "(default: 10)", "layer weights 1/N_l^2", "covariance"):
        assert snippet in text
    assert "(default: 1000)" in " ".join(_help("evaluate").split())


class TestConfig:
    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"synthesis": {"iterations": 40, "batch_size": 4}}))
        cfg = resolve_config(str(cfg_file), ["synthesis.batch_size=6", "extractor.dtype=float64"],
                             {"synthesis.iterations": None, "synthesis.batch_size": 8})
        assert cfg["synthesis"]["iterations"] == 40
        assert cfg["synthesis"]["batch_size"] == 8
        assert cfg["extractor"]["dtype"] == "float64"

    def test_unknown_keys_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown"):
            resolve_config(None, ["synthesis.iters=3"], {})
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"optimizer": {}}))
        with pytest.raises(ConfigError):
            resolve_config(str(cfg_file), [], {})

    def test_parser_builds(self):
        assert build_parser().parse_args(["visualize", "x.tif", "--out", "y.png"]).command == "visualize"


def test_fit_pca_prints_table(data, tmp_path, capsys):
    assert main(["fit-pca", str(data / "lr" / "*.tif"), "--out", str(tmp_path / "p.json")]) == 0
    lines = capsys.readouterr().out.splitlines()
    k3 = [ln for ln in lines if ln.split()[0] == "3"][0]
    assert float(k3.split()[-1]) > 0.999
    assert (tmp_path / "run_config.json").exists()


def test_fit_pca_empty_glob(tmp_path):
    assert main(["fit-pca", str(tmp_path / "none" / "*.tif"), "--out", str(tmp_path / "p.json")]) == 1


def test_usage_errors_exit_1(data, tmp_path, capsys):
    assert main(["synthesize", str(data / "ex.tif"), "--method", "pca", "--out", str(tmp_path)]) == 1
    assert "requires --projector" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["synthesize", "--bogus"])
    assert exc.value.code == 1


def test_synthesize_and_evaluate(data, tmp_path):
    out = tmp_path / "s"
    assert main(["synthesize", str(data / "ex.tif"), "--iters", "1", "--out", str(out), *NET]) == 0
    snap = json.loads((out / "run_config.json").read_text())
    assert snap["config"]["synthesis"]["iterations"] == 1 and snap["method"] == "stochastic"
    assert snap["config"]["synthesis"]["batch_size"] == 10
    img = load_multispectral(out / "synthesis.tif")
    assert img.num_bands == 5 and (out / "trace.csv").exists() and (out / "synthesis.png").exists()

    rep = tmp_path / "same.json"
    assert main(["evaluate", str(data / "ex.tif"), str(data / "ex.tif"), "--out", str(rep),
                 "--directions", "20", *NET]) == 0
    d = json.loads(rep.read_text())
    assert set(d) == set(SCALAR_KEYS) | set(BAND_KEYS)
    assert all(d[k] in (0.0, None) for k in SCALAR_KEYS)
    assert d["L_style^MS"] == 0.0

    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        assert main(["evaluate", str(data / "ex.tif"), str(out / "synthesis.tif"), "--out", str(path),
                     "--directions", "20", "--direction-seed", "3", *NET]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_experiment_and_resume(data, tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"corpus": [str(data / "ex.tif")], "methods": ["pca"], "output_dir": "out",
                                "synthesis": {"iterations": 2}, "extractor": {"arch": "vgg19-compact"},
                                "metrics": {"directions": 16}}))
    assert main(["experiment", str(plan)]) == 0
    first = (tmp_path / "out" / "records.jsonl").read_bytes()
    assert main(["experiment", str(plan)]) == 0
    assert (tmp_path / "out" / "records.jsonl").read_bytes() == first
    assert main(["batch-study", str(plan), "--batch-sizes", "1,2", "--set", "synthesis.iterations=1"]) == 0
    assert (tmp_path / "out" / "batch_study" / "table_batch.csv").exists()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"corpus": [str(data / "ex.tif")], "methods": ["nope"], "output_dir": "o"}))
    assert main(["experiment", str(bad)]) == 1


def test_experiment_partial_failure_exit_2(data, tmp_path):
    export_multispectral(correlated_field(40, 40, 5, seed=0), tmp_path / "small.tif")
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"corpus": [str(data / "ex.tif"), str(tmp_path / "small.tif")],
                                "methods": ["pca"], "output_dir": "out", "synthesis": {"iterations": 1},
                                "extractor": {"arch": "vgg19-compact"}, "metrics": {"directions": 8}}))
    assert main(["experiment", str(plan)]) == 2


def test_visualize(data, tmp_path):
    out = tmp_path / "v.png"
    assert main(["visualize", str(data / "ex.tif"), "--groups", "0,1;2,3;4", "--out", str(out)]) == 0
    assert out.stat().st_size > 0
    assert main(["visualize", str(data / "ex.tif"), "--groups", "0;1;9", "--out", str(out)]) == 1
