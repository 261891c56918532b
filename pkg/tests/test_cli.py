import json

import matplotlib.image as mpimg
import numpy as np
import pytest

from favae import cli, data_io, generation
from favae.cli import ConfigError, main, resolve_config
from favae.views import MultilabelView

SPEC = {
    "n": 60, "k_true": 2, "seed": 3,
    "views": [
        {"name": "a", "d": 4, "shared_factors": [1], "private_factors": [2]},
        {"name": "lab", "kind": "multilabel", "d": 3, "shared_factors": [1]},
        {"name": "img", "kind": "image", "d": 9, "shared_factors": [1], "latent_dim": 2, "hidden": 4},
    ],
}
CONFIG = {"model": {"k_c": 4}, "train": {"max_outer_iters": 3, "inner_epochs": 1},
          "views": {"img": {"latent_dim": 2, "hidden": [4]}}}


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os
    for name in list(os.environ):
        if name.startswith("FAVAE_"):
            monkeypatch.delenv(name)


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = write_json(root / "spec.json", SPEC)
    assert main(["synth", spec, "--out", str(root / "data")]) == 0
    cfg = write_json(root / "config.json", CONFIG)
    assert main(["train", str(root / "data" / "manifest.json"), "--config", cfg, "--out", str(root / "run")]) == 0
    return root


def test_synth_outputs_and_determinism(run, tmp_path):
    files = sorted(p.name for p in (run / "data").iterdir())
    assert {"manifest.json", "a.favm", "lab.favm", "img.favm", "truth", "spec.json"} <= set(files)
    assert main(["synth", str(run / "spec.json"), "--out", str(tmp_path / "again")]) == 0
    for p in (run / "data").rglob("*.favm"):
        rel = p.relative_to(run / "data")
        assert p.read_bytes() == (tmp_path / "again" / rel).read_bytes()


def test_synth_bad_factor_names_path(tmp_path, capsys):
    bad = dict(SPEC, views=[{"name": "a", "d": 3, "shared_factors": [7]}])
    assert main(["synth", write_json(tmp_path / "s.json", bad), "--out", str(tmp_path / "o")]) == 2
    assert "views[0].shared_factors[0]" in capsys.readouterr().err


def test_train_outputs(run):
    out = run / "run"
    for name in ("config.json", "invocation.json", "summary.json", "trace.jsonl", "elbo.png", "gll_kl.png",
                 "checkpoint/checkpoint.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 3 and summary["fa_elbo_monotone"]
    assert len((out / "trace.jsonl").read_text().splitlines()) == 3
    assert json.loads((out / "config.json").read_text())["train"]["max_outer_iters"] == 3


def test_resume_finished_run_is_noop(run):
    ck = run / "run" / "checkpoint" / "checkpoint.json"
    before = ck.read_bytes()
    argv = ["train", str(run / "data" / "manifest.json"), "--config", str(run / "config.json"),
            "--out", str(run / "run"), "--resume"]
    assert main(argv) == 0
    assert ck.read_bytes() == before


def test_resume_continues_to_more_iterations(run, tmp_path):
    import shutil
    shutil.copytree(run / "run", tmp_path / "run")
    argv = ["resume", str(run / "data" / "manifest.json"), "--config", str(run / "config.json"),
            "--out", str(tmp_path / "run"), "--max-iters", "5"]
    assert main(argv) == 0
    assert json.loads((tmp_path / "run" / "summary.json").read_text())["iterations"] == 5


def test_unknown_config_key_exits_2(run, tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"train": {"max_iters": 3}})
    assert main(["train", str(run / "data" / "manifest.json"), "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "train.max_iters" in capsys.readouterr().err
    assert main(["train", str(run / "data" / "manifest.json"), "--set", "model.kc=3", "--out", str(tmp_path)]) == 2


def test_config_precedence(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"train": {"max_outer_iters": 7, "inner_epochs": 2}})
    assert resolve_config(cfg, {})["train"]["max_outer_iters"] == 7
    env = {"FAVAE_TRAIN__MAX_OUTER_ITERS": "9", "FAVAE_VIEWS__img__BETA": "4"}
    resolved = resolve_config(cfg, env)
    assert resolved["train"]["max_outer_iters"] == 9 and resolved["train"]["inner_epochs"] == 2
    assert resolved["views"]["img"]["beta"] == 4
    assert resolve_config(cfg, env, ["train.max_outer_iters=11"])["train"]["max_outer_iters"] == 11
    assert resolve_config(cfg, env, ["train.max_outer_iters=11"],
                          {"train.max_outer_iters": 13})["train"]["max_outer_iters"] == 13
    with pytest.raises(ConfigError, match="FAVAE_TRAIN__NOPE"):
        resolve_config(None, {"FAVAE_TRAIN__NOPE": "1"})
    with pytest.raises(ConfigError):
        resolve_config(None, {}, ["train.max_outer_iters=0"])


def test_environment_is_read(monkeypatch):
    monkeypatch.setenv("FAVAE_MODEL__K_C", "5")
    assert resolve_config(None)["model"]["k_c"] == 5


def _request(tmp_path, run, **kw):
    _, ds = data_io.load_manifest(run / "data" / "manifest.json")
    doc = {"given": {"lab": ds["lab"].values[:4].tolist()}, "target": "img", "n_samples": 2, "seed": 1}
    doc.update(kw)
    return write_json(tmp_path / "req.json", doc)


def test_generate(run, tmp_path):
    ck = str(run / "run" / "checkpoint")
    req = _request(tmp_path, run)
    assert main(["generate", ck, req, "--out", str(tmp_path / "g1")]) == 0
    assert main(["generate", ck, req, "--out", str(tmp_path / "g2")]) == 0
    s1 = data_io.read_matrix(tmp_path / "g1" / "img.samples.favm")
    assert s1.shape == (8, 9)
    assert s1.tobytes() == data_io.read_matrix(tmp_path / "g2" / "img.samples.favm").tobytes()
    assert mpimg.imread(tmp_path / "g1" / "img.png").ndim >= 2
    assert main(["generate", ck, req, "--out", str(tmp_path / "g3"), "--seed", "2"]) == 0
    assert s1.tobytes() != data_io.read_matrix(tmp_path / "g3" / "img.samples.favm").tobytes()


def test_generate_rejects_target_in_given(run, tmp_path, capsys):
    req = _request(tmp_path, run, target="lab")
    assert main(["generate", str(run / "run" / "checkpoint"), req, "--out", str(tmp_path / "g")]) == 2
    assert "given" in capsys.readouterr().err


def test_generate_multilabel_writes_probabilities(run, tmp_path):
    _, ds = data_io.load_manifest(run / "data" / "manifest.json")
    req = _request(tmp_path, run, given={"a": ds["a"].values[:3].tolist()}, target="lab")
    assert main(["generate", str(run / "run" / "checkpoint"), req, "--out", str(tmp_path / "g")]) == 0
    probs = data_io.read_matrix(tmp_path / "g" / "lab.probabilities.favm")
    samples = data_io.read_matrix(tmp_path / "g" / "lab.samples.favm")
    assert np.array_equal(samples, (probs >= 0.5).astype(float))


def test_cross_matches_library(run, tmp_path):
    ck = run / "run" / "checkpoint"
    _, ds = data_io.load_manifest(run / "data" / "manifest.json")
    x = ds["img"].values[:5]
    data_io.write_matrix(tmp_path / "x.favm", x)
    argv = ["cross", str(ck), "--from", "img", "--to", "a", "--input", str(tmp_path / "x.favm"),
            "--n-samples", "3", "--seed", "4", "--out", str(tmp_path / "c")]
    assert main(argv) == 0
    model, _, _ = data_io.load_checkpoint(ck)
    lib = generation.cross_generate(model, "img", x, "a", 3, 4)
    got = data_io.read_matrix(tmp_path / "c" / "a.samples.favm")
    assert got.tobytes() == lib.values.reshape(-1, 4).tobytes()
    argv[argv.index("a")] = "nope"
    assert main(argv) == 2


def test_interpolate(run, tmp_path):
    ck = str(run / "run" / "checkpoint")
    assert main(["interpolate", ck, "--space", "private", "--view", "img", "--start", "[0, 1]",
                 "--end", "[1, 0]", "--steps", "2", "--out", str(tmp_path / "p")]) == 0
    codes = data_io.read_matrix(tmp_path / "p" / "codes.favm")
    assert np.array_equal(codes, [[0.0, 1.0], [1.0, 0.0]])
    assert data_io.read_matrix(tmp_path / "p" / "img.favm").shape == (2, 9)
    model, _, _ = data_io.load_checkpoint(ck)
    k = model.k
    start, end = json.dumps([0.0] * k), json.dumps([1.0] * k)
    assert main(["interpolate", ck, "--space", "global", "--start", start, "--end", end, "--steps", "3",
                 "--out", str(tmp_path / "g")]) == 0
    gcodes = data_io.read_matrix(tmp_path / "g" / "codes.favm")
    assert np.allclose(gcodes[:, 0], [0.0, 0.5, 1.0])
    assert (tmp_path / "g" / "a.samples.favm").exists() and (tmp_path / "g" / "lab.samples.favm").exists()
    assert main(["interpolate", ck, "--space", "private", "--start", "[0]", "--end", "[1]",
                 "--out", str(tmp_path / "x")]) == 2


def test_relevance(run, tmp_path):
    ck = str(run / "run" / "checkpoint")
    assert main(["relevance", ck, "--out", str(tmp_path / "r")]) == 0
    model, _, _ = data_io.load_checkpoint(ck)
    m = data_io.read_matrix(tmp_path / "r" / "relevance.favm")
    assert m.shape == (len(model.views), model.k) and np.all(m >= 0)
    assert mpimg.imread(tmp_path / "r" / "relevance.png").shape[:2] == m.shape
    lines = (tmp_path / "r" / "relevance.txt").read_text().strip().splitlines()
    assert len(lines) == 2 + model.k
    assert main(["relevance", ck, "--mode", "signed_mean", "--reference", "a", "--out", str(tmp_path / "s")]) == 0


def test_inspect(run, capsys):
    assert main(["inspect", str(run / "run" / "checkpoint")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["iteration"] == 3 and set(doc["views"]) == {"a", "lab", "img"}
    assert doc["views"]["lab"]["kind"] == "multilabel" and "tau_mean" not in doc["views"]["lab"]


def test_missing_checkpoint_exits_3(tmp_path):
    assert main(["inspect", str(tmp_path / "none")]) == 3


def test_bad_arguments_exit_2():
    assert main(["train"]) == 2
    assert main(["frobnicate"]) == 2


def test_training_failure_exits_4_and_keeps_checkpoint(run, tmp_path, monkeypatch):
    from favae.errors import NumericalError

    def boom(self, z, hp):
        raise NumericalError("synthetic failure")

    calls = {"n": 0}
    real = MultilabelView.update_w

    def flaky(self, z, hp):
        calls["n"] += 1
        if calls["n"] > 1:
            boom(self, z, hp)
        return real(self, z, hp)

    monkeypatch.setattr(MultilabelView, "update_w", flaky)
    argv = ["train", str(run / "data" / "manifest.json"), "--config", str(run / "config.json"),
            "--out", str(tmp_path / "fail")]
    assert main(argv) == 4
    assert (tmp_path / "fail" / "checkpoint" / "checkpoint.json").exists()
    model, _, _ = data_io.load_checkpoint(tmp_path / "fail" / "checkpoint")
    assert model.iteration == 1


def test_exit_code_mapping():
    from favae.errors import ChecksumError, StructuralError, TrainingError
    assert cli.exit_code(TrainingError("x", 1, "v")) == 4
    assert cli.exit_code(ChecksumError("x")) == 3
    assert cli.exit_code(FileNotFoundError("x")) == 3
    assert cli.exit_code(StructuralError("x")) == 2
