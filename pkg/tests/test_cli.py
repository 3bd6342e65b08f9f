import json
from pathlib import Path

import numpy as np
import pytest

from udaforge import io
from udaforge.cli import main

TINY_TRAIN = {
    "mode": "source_only",
    "epochs": 2,
    "batch_size": 8,
    "channels": [2, 3],
    "feature_dim": 8,
    "n_critic": 2,
    "seed": 0,
}


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def synth_cfg(out):
    return {
        "out_dir": str(out),
        "synth": {
            "hw": [8, 8],
            "n_patients": 4,
            "slices_per_patient": 10,
            "mode": "spatial",
            "source": {"seed": 1},
            "target": {"seed": 2},
        },
    }


@pytest.fixture(scope="module")
def synth_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    cfg = write_cfg(out / "synth.json", synth_cfg(out))
    assert main(["synth", "--config", cfg]) == 0
    return out


def test_synth_writes_datasets_and_manifest(synth_out):
    assert (synth_out / "source.uds").exists()
    assert (synth_out / "target.uds").exists()
    manifest = json.loads((synth_out / "manifest.json").read_text())
    counts = manifest["counts"]["source"]
    assert len(set(counts.values())) == 1  # balanced classes
    assert manifest["seeds"] == {"source": 1, "target": 2}


def test_synth_is_byte_identical(tmp_path, synth_out):
    cfg = write_cfg(tmp_path / "synth.json", {**synth_cfg(tmp_path)})
    assert main(["synth", "--config", cfg]) == 0
    assert (tmp_path / "source.uds").read_bytes() == (
        synth_out / "source.uds"
    ).read_bytes()


def test_synth_rejects_equal_seeds(tmp_path, capsys):
    cfg = synth_cfg(tmp_path)
    cfg["synth"]["target"]["seed"] = 1
    path = write_cfg(tmp_path / "synth.json", cfg)
    assert main(["synth", "--config", path]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "bad_value"


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    cfg = synth_cfg(tmp_path)
    cfg["synth"]["patients"] = 4
    path = write_cfg(tmp_path / "bad.json", cfg)
    assert main(["synth", "--config", path]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "unknown_key"


def test_missing_dataset_file_reports_io_error(tmp_path, capsys):
    cfg = {
        "out_dir": str(tmp_path),
        "train": {**TINY_TRAIN, "source": str(tmp_path / "nope.uds")},
    }
    path = write_cfg(tmp_path / "train.json", cfg)
    assert main(["train", "--config", path]) == 5
    assert json.loads(capsys.readouterr().err.strip())["error"] == "not_found"


@pytest.fixture(scope="module")
def trained(synth_out, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = {
        "out_dir": str(out),
        "train": {
            **TINY_TRAIN,
            "mode": "uda",
            "source": str(synth_out / "source.uds"),
            "target": str(synth_out / "target.uds"),
        },
    }
    path = write_cfg(out / "train.json", cfg)
    assert main(["train", "--config", path]) == 0
    return out


def test_train_outputs_exist(trained):
    assert (trained / "checkpoint" / "manifest.json").exists()
    log = (trained / "trainlog.csv").read_text().strip().splitlines()
    # 4 patients x 10 slices = 40 labeled; half batch 4 -> 10 steps/epoch
    assert len(log) == 1 + 2 * 10
    header = log[0].split(",")
    for col in ("iteration", "gamma", "lr", "ce", "center", "stat_dist",
                "critic_loss", "wasserstein"):
        assert col in header


def test_train_mode_flag_ignores_target(synth_out, tmp_path):
    cfg = {
        "out_dir": str(tmp_path),
        "train": {**TINY_TRAIN, "source": str(synth_out / "source.uds")},
    }
    path = write_cfg(tmp_path / "train.json", cfg)
    assert main(["train", "--config", path, "--mode", "source_only"]) == 0


def test_train_rejects_mode_mismatch(synth_out, tmp_path, capsys):
    cfg = {
        "out_dir": str(tmp_path),
        "train": {
            **TINY_TRAIN,
            "input_mode": "kspace",
            "source": str(synth_out / "source.uds"),
        },
    }
    path = write_cfg(tmp_path / "train.json", cfg)
    assert main(["train", "--config", path]) == 2
    assert json.loads(capsys.readouterr().err.strip())["error"] == "mode_mismatch"


def test_resumed_run_continues_gamma_schedule(synth_out, tmp_path):
    base = {
        **TINY_TRAIN,
        "mode": "uda",
        "epochs": 4,
        "checkpoint_every": 2,
        "source": str(synth_out / "source.uds"),
        "target": str(synth_out / "target.uds"),
    }
    full_dir = tmp_path / "full"
    cfg = write_cfg(tmp_path / "a.json", {"out_dir": str(full_dir), "train": base})
    assert main(["train", "--config", cfg]) == 0

    resumed_dir = tmp_path / "resumed"
    cfg2 = write_cfg(
        tmp_path / "b.json",
        {
            "out_dir": str(resumed_dir),
            "train": {**base, "resume_from": str(full_dir / "checkpoint_ep0002")},
        },
    )
    assert main(["train", "--config", cfg2]) == 0

    full_rows = (full_dir / "trainlog.csv").read_text().strip().splitlines()
    res_rows = (resumed_dir / "trainlog.csv").read_text().strip().splitlines()
    # resumed log holds exactly the second half, gamma column included
    assert res_rows[1:] == full_rows[1 + (len(full_rows) - 1) // 2 :]
    a = (full_dir / "checkpoint" / "manifest.json").read_bytes()
    b = (resumed_dir / "checkpoint" / "manifest.json").read_bytes()
    assert a == b


@pytest.fixture(scope="module")
def evaluated(synth_out, trained, tmp_path_factory):
    out = tmp_path_factory.mktemp("eval")
    cfg = {
        "out_dir": str(out),
        "eval": {
            "checkpoint": str(trained / "checkpoint"),
            "dataset": str(synth_out / "target.uds"),
        },
    }
    path = write_cfg(out / "eval.json", cfg)
    assert main(["eval", "--config", path]) == 0
    return out


def test_eval_metrics_json_has_exactly_the_five_keys(evaluated):
    m = json.loads((evaluated / "metrics.json").read_text())
    assert set(m) == {"accuracy", "precision", "recall", "f1", "auc"}


def test_eval_outputs(evaluated, synth_out):
    preds = (evaluated / "predictions.csv").read_text().strip().splitlines()
    target = io.read_dataset(synth_out / "target.uds")
    assert len(preds) == 1 + len(target)
    cm = [
        [int(v) for v in row.split(",")]
        for row in (evaluated / "confusion.csv").read_text().strip().splitlines()
    ]
    assert np.asarray(cm).shape == (5, 5)
    assert np.asarray(cm).sum() == len(target)
    feats = io.read_tensor(evaluated / "features.ten")
    assert feats.shape == (len(target), 8)


def test_eval_is_deterministic(evaluated, synth_out, trained, tmp_path):
    cfg = {
        "out_dir": str(tmp_path),
        "eval": {
            "checkpoint": str(trained / "checkpoint"),
            "dataset": str(synth_out / "target.uds"),
        },
    }
    path = write_cfg(tmp_path / "eval.json", cfg)
    assert main(["eval", "--config", path]) == 0
    for name in ("predictions.csv", "metrics.json", "confusion.csv"):
        assert (tmp_path / name).read_bytes() == (evaluated / name).read_bytes()


def test_eval_rejects_checkpoint_dataset_mismatch(trained, tmp_path, capsys):
    rng = np.random.default_rng(0)
    from udaforge.dataset import Dataset

    ds = Dataset(
        "kspace",
        rng.normal(size=(4, 2, 8, 8)).astype(np.float32),
        np.array([0, 1, 2, 3], dtype=np.uint8),
        np.zeros(4, dtype=np.uint8),
        np.arange(4, dtype=np.uint32),
    )
    io.write_dataset(tmp_path / "k.uds", ds)
    cfg = {
        "out_dir": str(tmp_path),
        "eval": {
            "checkpoint": str(trained / "checkpoint"),
            "dataset": str(tmp_path / "k.uds"),
        },
    }
    path = write_cfg(tmp_path / "eval.json", cfg)
    assert main(["eval", "--config", path]) == 2
    assert json.loads(capsys.readouterr().err.strip())["error"] == "spec_mismatch"


@pytest.fixture(scope="module")
def reported(synth_out, tmp_path_factory):
    out = tmp_path_factory.mktemp("report")
    cfg = {
        "out_dir": str(out),
        "report": {
            "protocol": {
                "source": str(synth_out / "source.uds"),
                "target": str(synth_out / "target.uds"),
                "k": 2,
                "seeds": [0],
                "folds": [0],
                "train": dict(TINY_TRAIN, mode="uda"),
            },
            "figures": True,
        },
    }
    path = write_cfg(out / "report.json", cfg)
    assert main(["report", "--config", path]) == 0
    return out


def test_report_emits_tables_and_plot_data(reported):
    table = (reported / "table.csv").read_text().strip().splitlines()
    assert len(table) == 4  # header + three modes
    assert table[0].split(",")[1:] == ["accuracy", "precision", "recall", "f1", "auc"]
    gap = (reported / "gap_coverage.csv").read_text().strip().splitlines()
    assert gap[0] == "metric,lower,uda,upper,coverage"
    assert len(gap) == 6
    assert (reported / "protocol.json").exists()
    assert (reported / "pca.csv").exists()
    assert (reported / "trend.csv").exists()


def test_report_coverage_column_matches_definition(reported):
    rows = (reported / "gap_coverage.csv").read_text().strip().splitlines()[1:]
    for row in rows:
        metric, lower, uda, upper, cov = row.split(",")
        if cov == "NA":
            assert abs(float(upper) - float(lower)) < 1e-12
        else:
            want = (float(uda) - float(lower)) / (float(upper) - float(lower))
            assert float(cov) == pytest.approx(want, abs=1e-12)


def test_report_renders_figures(reported):
    for name in ("gap_bars.png", "features_pca.png", "distance_trend.png"):
        data = (reported / name).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert len(data) > 1000


def test_report_from_existing_runs_without_figures(reported, tmp_path):
    cfg = {
        "out_dir": str(tmp_path),
        "report": {"runs": str(reported / "protocol.json"), "figures": False},
    }
    path = write_cfg(tmp_path / "report.json", cfg)
    assert main(["report", "--config", path]) == 0
    assert (tmp_path / "table.csv").exists()
    assert not (tmp_path / "gap_bars.png").exists()
    assert (tmp_path / "table.csv").read_bytes() == (reported / "table.csv").read_bytes()
