import csv
import hashlib
import json

import numpy as np
import pytest

from kdp.cli import build_config, load_defaults, main, parse_overrides, UsageError
from kdp.drift import ABLATIONS
from kdp.trajkit import WindowDataset, WindowShape, load_dataset, save_dataset


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--env", "bimodal1d", "--episodes", "100", "--seed", "7",
                 "--out", str(root / "data")]) == 0
    return root / "data" / "dataset.kdpw"


@pytest.fixture(scope="module")
def kdp_ckpt(data):
    out = data.parent.parent / "kdp"
    assert main(["train", "kdp", "--data", str(data), "--steps", "3", "--hidden", "16",
                 "--noise-dim", "4", "--out", str(out)]) == 0
    return out / "kdp.kdpn"


def test_gen_data_deterministic_and_creates_dirs(tmp_path):
    a, b = tmp_path / "a" / "deep", tmp_path / "b"
    for out in (a, b):
        assert main(["gen-data", "--env", "bimodal1d", "--episodes", "1000", "--seed", "7",
                     "--out", str(out)]) == 0
    assert sha(a / "dataset.kdpw") == sha(b / "dataset.kdpw")
    assert sha(a / "dataset.kdpw.json") == sha(b / "dataset.kdpw.json")
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["command"] == "gen-data" and len(cfg["config_hash"]) == 16


def test_unknown_env_is_usage_error(tmp_path, capsys):
    assert main(["gen-data", "--env", "atari", "--out", str(tmp_path)]) == 2
    assert "unknown env" in capsys.readouterr().err


def test_default_out_dir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("KDP_OUT_DIR", str(tmp_path / "runs"))
    assert main(["gen-data", "--env", "bimodal1d", "--episodes", "2"]) == 0
    assert (tmp_path / "runs" / "gen-data" / "dataset.kdpw").exists()


def test_missing_dataset_is_io_error(tmp_path):
    assert main(["train", "kdp", "--data", str(tmp_path / "nope.kdpw")]) == 3


def test_corrupt_dataset_is_io_error(data, tmp_path):
    bad = tmp_path / "bad.kdpw"
    raw = bytearray(data.read_bytes())
    raw[200] ^= 0xFF
    bad.write_bytes(bytes(raw))
    (tmp_path / "bad.kdpw.json").write_text((data.parent / "dataset.kdpw.json").read_text())
    assert main(["train", "bc", "--data", str(bad), "--steps", "1", "--out", str(tmp_path)]) == 3


def test_train_zero_steps_writes_checkpoint(data, tmp_path):
    assert main(["train", "kdp", "--data", str(data), "--steps", "0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "kdp.kdpn").exists() and (tmp_path / "kdp.json").exists()
    assert (tmp_path / "report.csv").read_text().startswith("step,loss,")


def test_ablation_flags_recorded_in_hash(data, tmp_path):
    hashes = {}
    for name, field, value in (("no_keying", "use_keying", False),
                               ("attraction_only", "repulsion_enabled", False)):
        out = tmp_path / name
        assert main(["train", "kdp", "--data", str(data), "--steps", "0", "--ablate", name,
                     "--out", str(out)]) == 0
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["config"]["drift"][field] is value and cfg["ablation"] == name
        hashes[name] = cfg["config_hash"]
    assert len(set(hashes.values())) == 2
    assert main(["train", "bc", "--data", str(data), "--ablate", "no_keying"]) == 2


def test_invalid_override_lists_valid_keys(data, tmp_path, capsys):
    assert main(["train", "kdp", "--data", str(data), "--stepz", "3", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "--stepz" in err and "use_keying" in err and "batch_size" in err
    assert main(["train", "kdp", "--data", str(data), "--use-keying", "maybe"]) == 2


def test_config_layering(tmp_path):
    defaults = load_defaults()
    assert build_config("kdp", {}, defaults).steps == 5000
    custom = dict(defaults, kdp=dict(defaults["kdp"], steps=7))
    assert build_config("kdp", {}, custom).steps == 7
    cfg = build_config("kdp", {"steps": "9", "temperatures": "0.1,0.3"}, custom, "no_keying")
    assert cfg.steps == 9 and cfg.drift.temperatures == (0.1, 0.3) and not cfg.drift.use_keying
    assert build_config("diffuser", {"hidden": "32,8"}, defaults).hidden == (32, 8)
    assert parse_overrides(["--lr=0.1", "--use-keying", "off"]) == {"lr": "0.1", "use_keying": "off"}
    with pytest.raises(UsageError):
        parse_overrides(["steps"])
    bad = tmp_path / "d.json"
    bad.write_text(json.dumps({"version": 99}))
    assert main(["train", "kdp", "--data", str(bad), "--defaults", str(bad)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_code(tmp_path):
    w = np.random.default_rng(0).standard_normal((20, 4, 2)).astype(np.float32)
    w[3, 2, 1] = np.inf
    save_dataset(WindowDataset(WindowShape(4, 1, 1), w), tmp_path / "inf.kdpw")
    assert main(["train", "kdp", "--data", str(tmp_path / "inf.kdpw"), "--steps", "2",
                 "--batch-size", "20", "--hidden", "8", "--noise-dim", "2",
                 "--out", str(tmp_path / "o")]) == 4


def test_scorer_needs_rewards(tmp_path):
    w = np.zeros((10, 4, 2), np.float32)
    save_dataset(WindowDataset(WindowShape(4, 1, 1), w), tmp_path / "d.kdpw")
    assert main(["train", "scorer", "--data", str(tmp_path / "d.kdpw"),
                 "--out", str(tmp_path / "o")]) == 2


def test_eval_zero_episodes(kdp_ckpt, tmp_path):
    assert main(["eval", "--checkpoint", str(kdp_ckpt), "--env", "bimodal1d", "--episodes", "0",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_text().splitlines() == [
        "episode,success,return,steps,nfe_total,pl_p50_ms,e2e_p50_ms"]


def test_eval_ranked_without_scorer(kdp_ckpt, tmp_path):
    assert main(["eval", "--checkpoint", str(kdp_ckpt), "--env", "bimodal1d", "--ranked",
                 "--out", str(tmp_path)]) == 2


def test_eval_shape_mismatch(kdp_ckpt, tmp_path):
    assert main(["eval", "--checkpoint", str(kdp_ckpt), "--env", "pointmaze2d",
                 "--out", str(tmp_path)]) == 2


def _untimed(path):
    with open(path) as fh:
        return [{k: v for k, v in r.items() if not k.endswith("_ms")} for r in csv.DictReader(fh)]


def test_eval_fixed_seed_reproducible(kdp_ckpt, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        assert main(["eval", "--checkpoint", str(kdp_ckpt), "--env", "bimodal1d", "--K", "4",
                     "--L", "2", "--episodes", "3", "--seed", "5", "--trajectories",
                     "--out", str(tmp_path / name)]) == 0
        line = capsys.readouterr().out.strip()
        outs.append(line.split(" pl_p50_ms")[0])
    assert outs[0] == outs[1]
    assert _untimed(tmp_path / "a" / "metrics.csv") == _untimed(tmp_path / "b" / "metrics.csv")
    assert sha(tmp_path / "a" / "trajectories.csv") == sha(tmp_path / "b" / "trajectories.csv")


def test_bench_grid(data, kdp_ckpt, tmp_path):
    den = tmp_path / "dif"
    assert main(["train", "diffuser", "--data", str(data), "--steps", "1", "--hidden", "8",
                 "--out", str(den)]) == 0
    assert main(["bench", "--env", "bimodal1d", "--kdp", str(kdp_ckpt), "--diffuser",
                 str(den / "diffuser.kdpn"), "--calls", "3", "--warmup", "1",
                 "--out", str(tmp_path / "b")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "b" / "bench.csv")))
    assert len(rows) == 6
    for r in rows:
        K = int(r["K"])
        if r["method"] == "kdp":
            assert (r["nfe"], int(r["bef"])) == ("1", K)
        else:
            assert (r["nfe"], int(r["bef"])) == ("20", 20 * K)
    assert main(["bench", "--env", "bimodal1d", "--out", str(tmp_path / "c")]) == 2


def test_ablate_matrix(data, tmp_path):
    assert main(["ablate", "--data", str(data), "--env", "bimodal1d", "--episodes", "1",
                 "--max-steps", "4", "--probe-k", "4", "--steps", "2", "--hidden", "8",
                 "--noise-dim", "2", "--eval-every", "0", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ablate.csv")))
    assert [r["ablation"] for r in rows] == list(ABLATIONS)
    assert len({r["config_hash"] for r in rows}) == len(ABLATIONS)


def test_svg_outputs(data, tmp_path):
    assert main(["train", "bc", "--data", str(data), "--steps", "5", "--hidden", "8", "--svg",
                 "--out", str(tmp_path)]) == 0
    svg = (tmp_path / "loss.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg


def test_dataset_round_trip_via_cli(data, tmp_path):
    ds = load_dataset(data)
    save_dataset(ds, tmp_path / "copy.kdpw")
    assert sha(tmp_path / "copy.kdpw") == sha(data)
