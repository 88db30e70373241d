import csv
import json

import numpy as np
import pytest

from hjbvisc.cli import main
from hjbvisc.networks import ConvexNet, SmoothMLP, save_checkpoint


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _config(tmp_path, **over):
    cfg = {"problem": "ex1", "method": "convex",
           "network": {"family": "convex", "hidden": 8, "activation": "softplus"},
           "train": {"max_epochs": 20, "n_inner": 64, "lr": 0.003},
           "output_dir": "out", "seed": 3}
    cfg.update(over)
    return _write(tmp_path / "run.json", cfg)


@pytest.fixture
def exact_ex1_checkpoint(tmp_path):
    net = SmoothMLP(2, (3,), quadratic_head=True)
    p = net.empty_params()
    p.block("P")[...] = np.diag([0.5, 1.0])
    path = tmp_path / "exact.json"
    save_checkpoint(path, net, p)
    return str(path)


def test_train_writes_artifacts_and_reports_status(tmp_path, capsys):
    code = main(["train", _config(tmp_path)])
    assert code == 2   # 20 epochs cannot reach loss_th2
    out = tmp_path / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["status"] == "not_converged"
    assert manifest["config"]["network"]["family"] == "convex"
    rows = list(csv.reader((out / "history.csv").open()))
    assert rows[0][:3] == ["stage", "strip_index", "epoch"] and len(rows) == 21
    assert (out / "checkpoint.json").exists()


def test_train_converges_with_loose_threshold(tmp_path):
    path = _config(tmp_path, train={"max_epochs": 50, "n_inner": 64, "loss_th1": 10.0, "loss_th2": 10.0})
    assert main(["train", path]) == 0


def test_epoch_cap_zero_exits_two(tmp_path):
    assert main(["train", _config(tmp_path, train={"max_epochs": 0})]) == 2


def test_bad_pairing_is_rejected_before_compute(tmp_path, capsys):
    path = _config(tmp_path, method="penalty", network={"family": "convex", "hidden": 8, "activation": "relu"})
    assert main(["train", path]) == 1
    assert "twice-differentiable" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("bad", [
    {"problem": "ex1", "network": {"family": "convex"}, "colour": "red"},
    {"problem": "ex9", "network": {"family": "convex"}},
    {"problem": "missing.json", "network": {"family": "convex"}},
    {"problem": "ex1", "network": {"family": "convex"}, "train": {"lr": -1}},
    {"problem": "ex1", "network": {"family": "convex"}, "strip": {"t_ini": 1.0, "dt": 0.5}},
    {"problem": "ex1"},
])
def test_invalid_configs_exit_one(tmp_path, bad):
    assert main(["train", _write(tmp_path / "c.json", bad)]) == 1


def test_unreadable_config_exits_one(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["train", str(tmp_path / "c.json")]) == 1
    assert main(["train", str(tmp_path / "absent.json")]) == 1


def test_same_seed_gives_identical_bytes(tmp_path):
    outputs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        d.mkdir()
        main(["train", _config(d)])
        main(["eval", str(d / "out" / "checkpoint.json"), "ex1", "--grid", "11x11", "--out", str(d / "ev")])
        outputs.append(((d / "out" / "history.csv").read_bytes(), (d / "ev" / "metrics.json").read_bytes()))
    assert outputs[0] == outputs[1]


def test_eval_from_manifest_reproduces_metrics(tmp_path):
    main(["train", _config(tmp_path)])
    ck = str(tmp_path / "out" / "checkpoint.json")
    main(["eval", ck, "ex1", "--out", str(tmp_path / "a")])
    main(["eval", ck, str(tmp_path / "out" / "manifest.json"), "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


def test_eval_exact_checkpoint(exact_ex1_checkpoint, tmp_path):
    assert main(["eval", exact_ex1_checkpoint, "ex1", "--grid", "21x21", "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["max_abs_err"] < 1e-12 and metrics["max_abs_residual"] < 1e-12
    assert metrics["convexity_violations"] == 0
    with (tmp_path / "surface.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x1", "x2", "V_nn", "V_true", "residual"] and len(rows) == 442


def test_eval_rejects_bad_grid_and_dims(exact_ex1_checkpoint, tmp_path):
    assert main(["eval", exact_ex1_checkpoint, "ex1", "--bounds=-2:1,-1:1", "--out", str(tmp_path)]) == 1
    assert main(["eval", exact_ex1_checkpoint, "ex1", "--grid", "5x5x5", "--out", str(tmp_path)]) == 1
    assert main(["eval", exact_ex1_checkpoint, "motivation", "--out", str(tmp_path)]) == 1
    assert main(["eval", str(tmp_path / "nope.json"), "ex1"]) == 1


def test_eval_sub_box(exact_ex1_checkpoint, tmp_path):
    assert main(["eval", exact_ex1_checkpoint, "ex1", "--grid", "3x3", "--bounds", "0:1,-0.5:0.5",
                 "--out", str(tmp_path)]) == 0
    rows = np.loadtxt(tmp_path / "surface.csv", delimiter=",", skiprows=1)
    assert rows[:, 0].min() == 0.0 and rows[:, 1].max() == 0.5


def test_audit_convex_and_tampered(tmp_path, capsys):
    net = ConvexNet(1, 1)
    p = net.empty_params()
    p.block("W0")[...] = 1.0
    p.block("W1")[...] = 1.0
    good = tmp_path / "good.json"
    save_checkpoint(good, net, p)
    assert main(["audit", str(good), "motivation", "--pairs", "10000"]) == 0
    assert json.loads(capsys.readouterr().out)["violations"] == 0
    p.block("W1")[...] = -1.0
    bad = tmp_path / "bad.json"
    save_checkpoint(bad, net, p)
    assert main(["audit", str(bad), "motivation", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "audit.json").read_text())
    assert report["violations"] >= 1 and report["kind"] == "midpoint_convexity"


def test_audit_smooth_net_uses_minors(exact_ex1_checkpoint, capsys):
    assert main(["audit", exact_ex1_checkpoint, "ex1", "--pairs", "200"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["kind"] == "hessian_minors" and report["fraction_ok"] == 1.0


def test_oracle_commands(tmp_path, capsys):
    assert main(["oracle", "ex1"]) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "verified"
    assert main(["oracle", "ex4", "--fd-eps", "1e-2", "--t-stop", "9.5", "--nx", "41", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "fd_solution.csv").exists() and json.loads((tmp_path / "oracle.json").read_text())["rel_err"] < 0.1
    assert main(["oracle", "ex1", "--fd-eps", "1e-2"]) == 1


def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as info:
        main(["eval"])
    assert info.value.code == 1
