"""End-to-end command surface: convert, train, evaluate, sweep, report."""

import contextlib
import io
import json

import numpy as np
import pytest
from scipy.io import savemat

from afnet import __version__, load_cube, load_ground_truth
from afnet.cli import main
from conftest import make_scene


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------

def test_convert_npy_pair(tmp_path):
    rng = np.random.default_rng(0)
    np.save(tmp_path / "cube.npy", rng.normal(size=(6, 5, 4)))
    np.save(tmp_path / "gt.npy", rng.integers(0, 3, size=(6, 5)))
    code, out, _ = run_cli(
        "convert", str(tmp_path / "cube.npy"),
        "--out", str(tmp_path / "scene"),
        "--gt", str(tmp_path / "gt.npy"),
    )
    assert code == 0
    assert "scene.hsij" in out and "scene_gt.hsij" in out
    cube = load_cube(tmp_path / "scene")
    assert (cube.height, cube.width, cube.bands) == (6, 5, 4)
    gt, legend = load_ground_truth(tmp_path / "scene_gt")
    assert gt.class_count == 2 and legend is not None


def test_convert_mat_key_selection(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.normal(size=(4, 4, 3))
    savemat(tmp_path / "one.mat", {"indian_pines_corrected": arr})
    code, _, _ = run_cli(
        "convert", str(tmp_path / "one.mat"), "--out", str(tmp_path / "a")
    )
    assert code == 0
    assert np.allclose(load_cube(tmp_path / "a").data, arr)

    savemat(tmp_path / "two.mat", {"raw": arr, "corrected": arr * 2})
    code, _, err = run_cli(
        "convert", str(tmp_path / "two.mat"), "--out", str(tmp_path / "b")
    )
    assert code == 1 and "pass an explicit key" in err
    code, _, _ = run_cli(
        "convert", str(tmp_path / "two.mat"),
        "--out", str(tmp_path / "b"), "--key", "corrected",
    )
    assert code == 0
    assert np.allclose(load_cube(tmp_path / "b").data, arr * 2)
    code, _, err = run_cli(
        "convert", str(tmp_path / "two.mat"),
        "--out", str(tmp_path / "c"), "--key", "nope",
    )
    assert code == 1 and "nope" in err


def test_convert_rejects_broken_sources(tmp_path):
    (tmp_path / "trunc.npy").write_bytes(b"\x93NUMPY junk")
    code, _, err = run_cli(
        "convert", str(tmp_path / "trunc.npy"), "--out", str(tmp_path / "x")
    )
    assert code == 1 and "error:" in err
    code, _, _ = run_cli(
        "convert", str(tmp_path / "absent.npy"), "--out", str(tmp_path / "x")
    )
    assert code == 2
    np.save(tmp_path / "flat.npy", np.zeros((4, 4)))
    code, _, err = run_cli(
        "convert", str(tmp_path / "flat.npy"), "--out", str(tmp_path / "x")
    )
    assert code == 1 and "3 axes" in err


def test_convert_is_idempotent(tmp_path):
    rng = np.random.default_rng(2)
    np.save(tmp_path / "c.npy", rng.normal(size=(4, 4, 2)))
    args = ("convert", str(tmp_path / "c.npy"), "--out", str(tmp_path / "s"))
    assert run_cli(*args)[0] == 0
    first = (tmp_path / "s.hsib").read_bytes()
    assert run_cli(*args)[0] == 0
    assert (tmp_path / "s.hsib").read_bytes() == first


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_ARGS = (
    "--model", "inception2d", "--patch-size", "7", "--components", "5",
    "--epochs", "2", "--batch-size", "32", "--seed", "4",
)


@pytest.fixture(scope="module")
def train_run(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("train_run")
    code, stdout, stderr = run_cli(
        "train", "--dataset", "ip", "--data-dir", str(data_dir),
        "--out", str(out), *TRAIN_ARGS,
    )
    assert code == 0, stderr
    return out, stdout


def test_train_reports_and_writes_artifacts(train_run):
    out, stdout = train_run
    assert "epochs completed: 2" in stdout
    for line in ("OA (%):", "AA (%):", "Kappa (%):", "train seconds:"):
        assert line in stdout
    for name in (
        "manifest.json", "split.json", "checkpoint.json", "checkpoint.params",
        "history.json", "report.json", "report.txt", "map.png", "gt_map.png",
    ):
        assert (out / name).exists(), name


def test_train_manifest_contents(train_run, data_dir):
    out, _ = train_run
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["command"] == "train"
    assert doc["tool_version"] == __version__
    assert doc["config"]["dataset"] == "ip"
    assert doc["config"]["model"] == "inception2d"
    assert doc["config"]["epochs"] == 2
    assert doc["config"]["data_dir"] == str(data_dir)
    seeds = doc["seeds"]
    root = seeds["root"]
    want = np.random.SeedSequence([root]).generate_state(3)
    assert [seeds["split"], seeds["init"], seeds["shuffle"]] == [int(v) for v in want]
    hashes = doc["input_hashes"]
    assert str(data_dir / "indian_pines.hsij") in hashes
    assert str(data_dir / "indian_pines_gt.hsib") in hashes
    assert all(len(h) == 64 for h in hashes.values())
    assert doc["timestamps"]["started"] <= doc["timestamps"]["finished"]
    assert isinstance(doc["threads"], int)


def test_train_rerun_from_manifest(train_run, tmp_path):
    out, _ = train_run
    rerun = tmp_path / "rerun"
    code, stdout, stderr = run_cli(
        "train", "--config", str(out / "manifest.json"), "--out", str(rerun)
    )
    assert code == 0, stderr
    a = json.loads((out / "report.json").read_text())
    b = json.loads((rerun / "report.json").read_text())
    for doc in (a, b):  # wall-clock timings legitimately differ
        doc.pop("tr_seconds"), doc.pop("te_seconds")
    assert a == b  # same resolved config and seeds, same numbers


def test_train_flag_overrides_config_file(tmp_path, data_dir):
    cfg = tmp_path / "settings.json"
    cfg.write_text(json.dumps({
        "dataset": "ip", "model": "inception2d", "patch_size": 7,
        "components": 5, "epochs": 3, "batch_size": 32,
        "fractions": "15/15/70", "data_dir": str(data_dir),
    }))
    out = tmp_path / "out"
    code, stdout, _ = run_cli(
        "train", "--config", str(cfg), "--epochs", "1", "--out", str(out)
    )
    assert code == 0
    assert "epochs completed: 1" in stdout  # the flag wins


def test_train_usage_errors(tmp_path, data_dir):
    code, _, err = run_cli("train", "--out", str(tmp_path / "o"))
    assert code == 2 and "dataset" in err
    code, _, err = run_cli(
        "train", "--dataset", "pu", "--data-dir", str(data_dir),
        "--out", str(tmp_path / "o"),
    )
    assert code == 2  # missing dataset resolves to a usage error
    code, _, err = run_cli(
        "train", "--dataset", "ip", "--data-dir", str(data_dir),
        "--fractions", "15/15", "--out", str(tmp_path / "o"),
    )
    assert code == 2 and "fractions" in err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": "ip", "warmup": 9}))
    code, _, err = run_cli("train", "--config", str(bad))
    assert code == 2 and "warmup" in err


def test_train_env_data_dir(tmp_path, data_dir, monkeypatch):
    monkeypatch.setenv("AFNET_DATA_DIR", str(data_dir))
    out = tmp_path / "envrun"
    code, _, stderr = run_cli(
        "train", "--dataset", "ip", "--epochs", "1", "--model", "inception2d",
        "--patch-size", "7", "--components", "5", "--out", str(out),
    )
    assert code == 0, stderr
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["config"]["data_dir"] == str(data_dir)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_checkpoint_on_test_split(train_run, data_dir, tmp_path):
    out, _ = train_run
    eval_dir = tmp_path / "eval"
    code, stdout, stderr = run_cli(
        "evaluate", "--checkpoint", str(out / "checkpoint"),
        "--dataset", "ip", "--data-dir", str(data_dir),
        "--split", str(out / "split.json"), "--out", str(eval_dir),
    )
    assert code == 0, stderr
    assert "OA (%)" in stdout
    for name in ("report.json", "report.txt", "map.png", "gt_map.png",
                 "manifest.json"):
        assert (eval_dir / name).exists(), name
    # the test split scores the same numbers train reported
    a = json.loads((out / "report.json").read_text())
    b = json.loads((eval_dir / "report.json").read_text())
    assert a["oa"] == b["oa"] and a["confusion"] == b["confusion"]


def test_evaluate_whole_scene_and_errors(train_run, data_dir, tmp_path):
    out, _ = train_run
    code, _, _ = run_cli(
        "evaluate", "--checkpoint", str(out / "checkpoint"),
        "--dataset", "ip", "--data-dir", str(data_dir),
        "--out", str(tmp_path / "all"),
    )
    assert code == 0
    doc = json.loads((tmp_path / "all" / "report.json").read_text())
    assert sum(sum(row) for row in doc["confusion"]) == 60  # every patch
    code, _, _ = run_cli(
        "evaluate", "--checkpoint", str(tmp_path / "nope"),
        "--dataset", "ip", "--data-dir", str(data_dir),
        "--out", str(tmp_path / "x"),
    )
    assert code == 2


# ---------------------------------------------------------------------------
# sweep + report
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep_run(tmp_path_factory, data_dir):
    plan = {
        "datasets": ["indian_pines"], "model": "inception2d",
        "sizes": [9], "repeats": 2, "components": 5, "epochs": 1,
    }
    plan_path = tmp_path_factory.mktemp("plans") / "plan.json"
    plan_path.write_text(json.dumps(plan))
    out = tmp_path_factory.mktemp("sweep_out")
    code, stdout, stderr = run_cli(
        "sweep", str(plan_path), "--data-dir", str(data_dir), "--out", str(out)
    )
    assert code == 0, stderr
    return out, stdout


def test_sweep_writes_reports_and_manifest(sweep_run):
    out, stdout = sweep_run
    assert "indian_pines (inception2d, spatial sweep, 2 repeat(s))" in stdout
    assert (out / "report.txt").read_text() in stdout
    doc = json.loads((out / "report.json").read_text())
    assert doc["axis"] == "spatial"  # inferred from the plan's sizes
    assert (out / "indian_pines" / "inception2d" / "spatial=9" / "run1"
            / "report.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "sweep"
    assert manifest["config"]["plan"]["sizes"] == [9]


def test_sweep_failures_set_exit_status(tmp_path, data_dir):
    plan_path = tmp_path / "plan.json"
    plan_path.write_text(json.dumps({
        "datasets": ["salinas"], "model": "inception2d",
        "fractions": [15], "repeats": 1, "components": 5, "epochs": 1,
    }))
    code, stdout, err = run_cli(
        "sweep", str(plan_path), "--data-dir", str(data_dir),
        "--out", str(tmp_path / "out"),
    )
    assert code == 1
    assert "FAILED" in stdout
    assert "1 cell(s) failed" in err


def test_sweep_ambiguous_axis(tmp_path, data_dir):
    plan_path = tmp_path / "plan.json"
    plan_path.write_text(json.dumps({
        "datasets": ["indian_pines"], "sizes": [9], "fractions": [15],
        "components": 5, "epochs": 1,
    }))
    code, _, err = run_cli(
        "sweep", str(plan_path), "--data-dir", str(data_dir),
        "--out", str(tmp_path / "out"),
    )
    assert code == 2 and "axis" in err


def test_report_rerenders_results_tree(sweep_run):
    out, _ = sweep_run
    code, text, _ = run_cli("report", str(out))
    assert code == 0
    assert text == (out / "report.txt").read_text()
    code, text, _ = run_cli("report", str(out), "--json")
    assert code == 0
    doc = json.loads(text)
    assert doc["tables"]["indian_pines"]["columns"] == ["9x9"]


def test_report_empty_directory(tmp_path):
    code, _, err = run_cli("report", str(tmp_path))
    assert code == 2 and "no results found" in err


# ---------------------------------------------------------------------------
# parser plumbing
# ---------------------------------------------------------------------------

def test_version_and_usage_exits():
    with pytest.raises(SystemExit) as exc:
        run_cli("--version")
    assert exc.value.code == 0
    with pytest.raises(SystemExit) as exc:
        run_cli()
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run_cli("train", "--model", "transformer")
    assert exc.value.code == 2
