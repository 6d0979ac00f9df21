import hashlib
import json
import pathlib

import pytest

from dnnlift import cli, opid


def _run(*argv):
    return cli.main(list(argv))


def _tree_digest(path):
    out = []
    for f in sorted(pathlib.Path(path).rglob("*")):
        if f.is_file():
            out.append((str(f.relative_to(path)),
                        hashlib.sha256(f.read_bytes()).hexdigest()))
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, classifier):
    d = tmp_path_factory.mktemp("cli")
    opid.save_classifier(classifier, str(d / "id.bin"))
    assert _run("gen", "--model", "cnn_lrn", "--style", "tvm-o3", "--seed", "5",
                "--out", str(d / "bundle"), "--save-source", str(d / "src")) == 0
    return d


def test_gen_deterministic(workdir, tmp_path):
    assert _run("gen", "--model", "cnn_lrn", "--style", "tvm-o3", "--seed", "5",
                "--out", str(tmp_path / "again")) == 0
    assert _tree_digest(workdir / "bundle") == \
        [x for x in _tree_digest(tmp_path / "again")]


def test_classify_and_topology(workdir, tmp_path):
    assert _run("classify", "--model", str(workdir / "id.bin"),
                "--bundle", str(workdir / "bundle"),
                "--out", str(tmp_path / "labels.json")) == 0
    doc = json.loads((tmp_path / "labels.json").read_text())
    assert doc["provenance"] == "tvm-o3"
    assert _run("topology", "--model", str(workdir / "id.bin"),
                "--bundle", str(workdir / "bundle"),
                "--out", str(tmp_path / "graph.json")) == 0
    g = json.loads((tmp_path / "graph.json").read_text())
    assert g["nodes"] and g["edges"]


def test_decompile_verify_loop(workdir, tmp_path):
    out = tmp_path / "dec"
    assert _run("decompile", "--bundle", str(workdir / "bundle"),
                "--model", str(workdir / "id.bin"), "--out", str(out)) == 0
    for artifact in ("model.json", "findings.json", "report.md", "graph.json",
                     "labels.json"):
        assert (out / artifact).exists(), artifact
    assert (out / "constraints").is_dir()
    ctext = next((out / "constraints").glob("*.txt")).read_text()
    assert "weight offsets" in ctext
    assert _run("verify", "--source", str(workdir / "src"),
                "--recovered", str(out), "-n", "20", "--tol", "1e-4") == 0


def test_decompile_deterministic(workdir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run("decompile", "--bundle", str(workdir / "bundle"),
                    "--model", str(workdir / "id.bin"), "--out", str(out)) == 0
    assert _tree_digest(a) == _tree_digest(b)


def test_verify_self_compare(workdir, tmp_path):
    assert _run("verify", "--source", str(workdir / "src"),
                "--recovered", str(workdir / "src"), "-n", "3") == 0


def test_verify_detects_perturbation(workdir, tmp_path):
    import numpy as np
    from dnnlift import model as mc
    spec = mc.load_spec(str(workdir / "src"))
    wname = next(iter(spec.params))
    spec.params[wname].data.ravel()[0] += 1.0
    mc.save_spec(spec, str(tmp_path / "bad"))
    assert _run("verify", "--source", str(workdir / "src"),
                "--recovered", str(tmp_path / "bad"), "-n", "5") == 1


def test_adversarial_gen_decompile_exit2(workdir, tmp_path):
    assert _run("gen", "--model", "conv6d", "--style", "tvm-o3", "--seed", "3",
                "--adversarial", "--tvm-ab", "32", "32",
                "--out", str(tmp_path / "adv")) == 0
    code = _run("decompile", "--bundle", str(tmp_path / "adv"),
                "--model", str(workdir / "id.bin"), "--out", str(tmp_path / "dec"))
    assert code == 2
    doc = json.loads((tmp_path / "dec" / "findings.json").read_text())
    assert any(e["error"] == "LayoutUnrecognized" for e in doc["errors"])
    assert not (tmp_path / "dec" / "model.json").exists()


def test_fatal_error_exit1(tmp_path):
    assert _run("verify", "--source", str(tmp_path / "nope"),
                "--recovered", str(tmp_path / "nope")) == 1
