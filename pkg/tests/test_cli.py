import csv
import json
import time

import numpy as np
import pytest

from erasure_ood import cli, metrics
from erasure_ood.checkpoint import load_checkpoint, save_checkpoint
from erasure_ood.datasets import read_float_map, read_imgb
from erasure_ood.uen import init_weights

SMALL = ["k_mixture=2", "branch_widths=4,6,4,3", "branch_kernels=3,5", "decoder_width=4"]


def run(tmp_path, command, *sets, oracle=False, config=None):
    argv = [command, "--out", str(tmp_path)]
    for s in sets:
        argv += ["--set", s]
    if oracle:
        argv.append("--oracle")
    if config:
        argv += ["--config", str(config)]
    return cli.main(argv)


def rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_config_text_parsing():
    cfg = cli.parse_config_text("# comment\n lr = 0.5  # trailing\n\nbranch_kernels = 3, 5\nthreshold =\n")
    assert cfg == {"lr": 0.5, "branch_kernels": (3, 5), "threshold": None}
    with pytest.raises(cli.ConfigError):
        cli.parse_config_text("nope = 1")
    with pytest.raises(cli.ConfigError):
        cli.parse_config_text("lr 0.5")
    with pytest.raises(cli.ConfigError):
        cli.parse_config_text("epochs = many")


def test_every_key_has_default_and_doc():
    cfg = cli.default_config()
    assert set(cfg) == set(cli.KEYS)
    assert all(k.doc for k in cli.KEYS.values())
    cli.uen_config(cfg), cli.detection_config(cfg), cli.entropy_config(cfg)


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("group_size = 4\nseed = 3\n")
    cfg = cli.load_config(str(p), ["seed=9"])
    assert cfg["group_size"] == 4 and cfg["seed"] == 9


def test_config_errors_exit_2(tmp_path):
    assert run(tmp_path, "entropy", "colour=red") == 2
    assert run(tmp_path, "entropy") == 2
    assert run(tmp_path, "entropy", "dataset=imgb:/nonexistent/x.imgb") == 2
    assert run(tmp_path, "train", "dataset=idx:/nonexistent/x") == 2
    assert run(tmp_path, "entropy", "dataset=synth:lowH:2:0", config=tmp_path / "missing.cfg") == 2
    assert cli.main(["frobnicate"]) == 2


def test_synth_writes_valid_imgb(tmp_path):
    assert run(tmp_path, "synth", "dataset=synth:midH:3:1") == 0
    assert read_imgb(tmp_path / "dataset.imgb").shape == (3, 3, 32, 32)


def test_entropy_single_image(tmp_path):
    assert run(tmp_path, "entropy", "dataset=synth:complex:1:0") == 0
    r = rows(tmp_path / "scores.csv")
    assert r[0] == ["index", "entropy_bits"] and len(r) == 2


def test_oracle_score_ordering(tmp_path):
    means = {}
    for fam in ("lowH", "highH"):
        d = tmp_path / fam
        assert run(d, "score", f"dataset=synth:{fam}:20:0", oracle=True) == 0
        means[fam] = np.mean(cli.read_scores(d / "scores.csv"))
    assert means["highH"] > means["lowH"]


@pytest.fixture(scope="module")
def small_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "checkpoint.uenc"
    cfg = cli.uen_config({**cli.default_config(), **dict(cli.parse_assignment(s, "") for s in SMALL)})
    save_checkpoint(path, init_weights(cfg))
    return path


def test_score_rows_and_byte_identical_rerun(tmp_path, small_checkpoint):
    args = ("dataset=synth:complex:7:2", f"checkpoint={small_checkpoint}", "batch_size=3")
    assert run(tmp_path / "a", "score", *args) == 0
    assert run(tmp_path / "b", "score", *args) == 0
    a, b = (tmp_path / "a" / "scores.csv").read_bytes(), (tmp_path / "b" / "scores.csv").read_bytes()
    assert a == b
    r = rows(tmp_path / "a" / "scores.csv")
    assert r[0] == ["index", "le_bits"] and len(r) == 8


def test_missing_checkpoint_exit_2(tmp_path):
    assert run(tmp_path, "score", "dataset=synth:complex:2:0") == 2


def test_heatmap_and_features(tmp_path, small_checkpoint):
    assert run(tmp_path, "heatmap", "dataset=synth:complex:3:0", f"checkpoint={small_checkpoint}") == 0
    hm = read_float_map(tmp_path / "heatmap.imgb")
    assert hm.shape == (1, 1, 32, 32)
    np.testing.assert_allclose(np.loadtxt(tmp_path / "heatmap.csv", delimiter=","), hm[0, 0], rtol=1e-6)
    assert run(tmp_path, "features", "dataset=synth:complex:3:0", f"checkpoint={small_checkpoint}") == 0
    assert np.load(tmp_path / "features.npy").shape[0] == 3


def test_zero_lr_keeps_initial_weights(tmp_path):
    assert run(tmp_path, "train", "dataset=synth:complex:8:0", "epochs=1", "batch_size=4", "lr=0", "seed=5", *SMALL) == 0
    trained, meta = load_checkpoint(tmp_path / "checkpoint.uenc")
    init = init_weights(trained.config)
    assert meta["epochs_run"] == 1
    for (_, a), (_, b) in zip(trained.arrays(), init.arrays()):
        assert a.tobytes() == b.tobytes()
    assert rows(tmp_path / "loss.csv")[0] == ["epoch", "L_total", "L_r", "L_e"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path):
    assert run(tmp_path, "train", "dataset=synth:complex:16:0", "epochs=3", "batch_size=8", "lr=1e30", *SMALL) == 3


@pytest.mark.slow
def test_train_smoke_run_is_fast_and_deterministic(tmp_path):
    sets = ("dataset=synth:complex:256:0", "epochs=2", "lr=1e-3", "seed=0")
    t0 = time.perf_counter()
    assert run(tmp_path / "a", "train", *sets) == 0
    elapsed = time.perf_counter() - t0
    assert elapsed < 60, elapsed
    assert len(rows(tmp_path / "a" / "loss.csv")) == 3
    assert run(tmp_path / "b", "train", *sets) == 0
    assert (tmp_path / "a" / "checkpoint.uenc").read_bytes() == (tmp_path / "b" / "checkpoint.uenc").read_bytes()
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()


def _write_pool(path, values):
    cli.write_scores(path, np.asarray(values), "score")
    return path


def test_detect_outputs_and_consistency(tmp_path):
    rng = np.random.default_rng(0)
    ids = _write_pool(tmp_path / "id.csv", rng.normal(size=200))
    tid = _write_pool(tmp_path / "tid.csv", rng.normal(size=100))
    ood = _write_pool(tmp_path / "ood.csv", rng.normal(0.7, 1.0, size=100))
    sets = (f"id_scores={ids}", f"test_id_scores={tid}", f"test_ood_scores={ood}", "group_size=5", "threshold=0.3")
    assert run(tmp_path / "a", "detect", *sets) == 0
    out = tmp_path / "a"
    for name in ("report.csv", "report.txt", "report.json", "kde.csv"):
        assert (out / name).exists()
    r = rows(out / "report.csv")
    assert r[0] == ["trial", "group", "origin", "kl", "decision"]
    rep = json.loads((out / "report.json").read_text())
    for run_info in rep["runs"]:
        g = [x for x in r[1:] if int(x[0]) == run_info["trial"]]
        pos = [float(x[3]) for x in g if x[2] == "ood"]
        neg = [float(x[3]) for x in g if x[2] == "id"]
        assert run_info["auroc"] == metrics.auroc(pos, neg)
    assert run(tmp_path / "b", "detect", *sets) == 0
    for name in ("report.csv", "report.txt", "report.json"):
        assert (out / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_detect_swap_symmetry(tmp_path):
    rng = np.random.default_rng(1)
    ids = _write_pool(tmp_path / "id.csv", rng.normal(size=300))
    a = _write_pool(tmp_path / "a.csv", rng.normal(size=200))
    b = _write_pool(tmp_path / "b.csv", rng.normal(0.4, 1.3, size=200))
    base = (f"id_scores={ids}", "group_size=10", "trials=10")
    assert run(tmp_path / "fwd", "detect", *base, f"test_id_scores={a}", f"test_ood_scores={b}") == 0
    assert run(tmp_path / "rev", "detect", *base, f"test_id_scores={b}", f"test_ood_scores={a}") == 0
    fwd = json.loads((tmp_path / "fwd" / "report.json").read_text())["summary"]["auroc"]["mean"]
    rev = json.loads((tmp_path / "rev" / "report.json").read_text())["summary"]["auroc"]["mean"]
    assert abs(fwd + rev - 1) <= 0.05


def test_detect_rejects_small_groups(tmp_path):
    p = _write_pool(tmp_path / "s.csv", np.arange(20.0))
    assert run(tmp_path, "detect", f"id_scores={p}", f"test_id_scores={p}", f"test_ood_scores={p}", "group_size=1") == 2


def test_detect_with_oracle_datasets(tmp_path):
    sets = ("id_dataset=synth:lowH:60:0", "test_id_dataset=synth:lowH:30:1", "test_ood_dataset=synth:highH:30:0",
            "group_size=5", "trials=2", "testset_draws=1")
    assert run(tmp_path, "detect", *sets, oracle=True) == 0
    assert json.loads((tmp_path / "report.json").read_text())["summary"]["auroc"]["mean"] == 1.0
