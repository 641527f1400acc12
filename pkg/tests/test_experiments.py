import csv
import math

import numpy as np
import pytest

from riconv.cli import main
from riconv.config import ConfigError, load_config, parse_mask
from riconv.experiments import (
    EXTRACT_HEADER,
    ResultTable,
    build_datasets,
    extract_irif,
    run_noise_sweep,
    run_repeatability,
)
from riconv.geometry import save_point_cloud, synth_shape
from riconv.model import build_network
from riconv.training import evaluate

TINY = """
[dataset]
n_train = 2
n_test = 1
[train]
epochs = 1
batch = 6
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ------------------------------------------------------------------- config


def test_defaults_and_overrides():
    cfg = load_config()
    assert cfg.command == "grid" and parse_mask(cfg.network.mask).columns[0] == "d"
    assert cfg.train.train_modes == ("none", "z", "so3")
    cfg = load_config(text="[train]\nepochs = 3 ; short\nlr=0.01\n[network]\nmask = d, phi\n", seed=4)
    assert cfg.train.epochs == 3 and cfg.train.lr == 0.01 and cfg.seed == 4
    assert parse_mask(cfg.network.mask) == parse_mask("C")


@pytest.mark.parametrize("text", [
    "[bogus]\nx=1\n",
    "[train]\nepochs_x=1\n",
    "[train]\nepochs=-1\n",
    "[train]\nbatch=1\n",
    "[train]\ntrain_mode=xy\n",
    "[network]\npreset=huge\n",
    "[network]\nmask=E\n",
    "[train]\nlr=fast\n",
    "[dataset]\nkind=files\n",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        load_config(text=text)


def test_network_config_follows_dataset():
    cfg = load_config(text="[network]\nkernel_size=3\n[dataset]\nn_points=1024\n")
    net = cfg.network_config(num_classes=6)
    assert net.in_points == 1024 and net.layers[0].kernel_size == 3


# ----------------------------------------------------------------- tables


def test_result_table_round_trip(tmp_path):
    t = ResultTable()
    t.append("grid", "z/so3", "accuracy_pct", 91.25, 0)
    t.append("grid", "z/so3", "unstable_samples", 0, 0)
    t.write_csv(tmp_path / "r.csv")
    back = ResultTable.read_csv(tmp_path / "r.csv")
    assert back.get("z/so3", "accuracy_pct") == 91.25
    assert read_csv(tmp_path / "r.csv")[0] == ["experiment", "condition", "metric", "value", "seed"]
    with pytest.raises(KeyError):
        back.get("z/z", "accuracy_pct")


# ----------------------------------------------------------- repeatability


@pytest.fixture(scope="module")
def repeat_small():
    cfg = load_config(text="[repeat]\nn_points=1024\npairs=300\n")
    return run_repeatability(cfg)


def test_repeatability_identity_is_exact():
    cfg = load_config(text="[repeat]\nn_points=1024\npairs=200\nshapes=cube,torus\n")
    res = run_repeatability(cfg, noise_factor=0.0, subsample=1.0, transform=False)
    errs = np.array([e for *_, m, e in res.errors if m == "lra"])
    assert len(errs) > 300 and errs.max() < 1.0


def test_repeatability_lra_tail_lightest(repeat_small):
    t = repeat_small.table
    for kind in ("sphere", "cube", "cylinder", "cone", "torus", "plane"):
        assert t.get(f"{kind}/lra", "tail_mass_gt60") <= t.get(f"{kind}/pm", "tail_mass_gt60")
    fr = [h[5] for h in repeat_small.histogram if h[0] == "torus" and h[1] == "lra"]
    assert len(fr) == 18 and math.isclose(sum(fr), 1.0)


def test_repeatability_deterministic(repeat_small):
    cfg = load_config(text="[repeat]\nn_points=1024\npairs=300\n")
    again = run_repeatability(cfg)
    assert again.errors == repeat_small.errors


# ---------------------------------------------------------------- sweeps


def test_noise_zero_matches_clean_eval(tmp_path):
    cfg = load_config(text=TINY + "[noise]\nsigmas=0,0.05\naxis_sources=lra\n")
    data = build_datasets(cfg)
    table = run_noise_sweep(cfg, data, tmp_path / "curve.csv")
    net = build_network(cfg.network_config(6))
    from riconv.experiments import fit
    net, _, test = fit(cfg, data)
    clean = evaluate(net, test, cfg.train.test_mode, seed=cfg.seed)
    assert table.get("lra/sigma=0", "accuracy_pct") == pytest.approx(100 * clean.metric)
    rows = read_csv(tmp_path / "curve.csv")
    assert rows[0] == ["axis_source", "sigma", "accuracy_pct", "seed"] and len(rows) == 3


# -------------------------------------------------------------------- CLI


def test_extract_rows_and_cli(tmp_path):
    cloud = synth_shape("torus", 600, 2)
    rows = extract_irif(cloud, reps=5, neighbors_k=9)
    assert len(rows) == 5 * 8 and len(rows[0]) == len(EXTRACT_HEADER)
    save_point_cloud(cloud, tmp_path / "t.xyz")
    (tmp_path / "c.ini").write_text(f"[extract]\ninput={tmp_path / 't.xyz'}\nreps=5\nneighbors_k=9\n")
    assert main(["extract", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "o")]) == 0
    got = read_csv(tmp_path / "o" / "irif.csv")
    assert tuple(got[0]) == EXTRACT_HEADER and len(got) == 41


def test_cli_errors(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[train]\nepochs=-1\n")
    assert main(["train", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path)]) == 2
    assert "epochs" in capsys.readouterr().err
    assert main(["eval", "--out", str(tmp_path)]) == 2
    (tmp_path / "ex.ini").write_text(f"[extract]\ninput={tmp_path / 'missing.xyz'}\n")
    assert main(["extract", "--config", str(tmp_path / "ex.ini"), "--out", str(tmp_path)]) == 2


def test_cli_repeat_outputs(tmp_path):
    (tmp_path / "r.ini").write_text("[repeat]\nshapes=cube\nn_points=512\npairs=50\n")
    assert main(["repeat", "--config", str(tmp_path / "r.ini"), "--out", str(tmp_path)]) == 0
    assert read_csv(tmp_path / "repeat_errors.csv")[0] == ["model_id", "point_id", "method", "error_deg"]
    assert read_csv(tmp_path / "repeat.csv")[0][0] == "experiment"
    assert len(read_csv(tmp_path / "repeat_hist.csv")) == 1 + 3 * 18


def test_cli_train_eval_deterministic(tmp_path):
    (tmp_path / "t.ini").write_text(TINY)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(tmp_path / "t.ini"), "--out", str(out), "--deterministic"]) == 0
        outs.append(read_csv(out / "metrics.csv"))
    assert outs[0][0] == ["epoch", "split", "mode", "metric", "value"]
    a = np.array([float(r[4]) for r in outs[0][1:]])
    b = np.array([float(r[4]) for r in outs[1][1:]])
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)
    (tmp_path / "e.ini").write_text(TINY + f"checkpoint={tmp_path / 'a' / 'model.ckpt'}\n")
    assert main(["eval", "--config", str(tmp_path / "e.ini"), "--out", str(tmp_path / "e")]) == 0
    rows = read_csv(tmp_path / "e" / "metrics.csv")
    assert len(rows) > 1
