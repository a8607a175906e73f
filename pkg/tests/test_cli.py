import json

import numpy as np
import pytest

from puae.cli import EXIT_DATA, EXIT_FAIL, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, grid_cells, main, parse_axes, parse_value
from puae.data_io import load_checkpoint, load_xyz, save_xyz
from puae.errors import ConfigError

TOY_TOML = """
[model]
neighbors = 4
enc_widths = [4, 4, 6, 6]
emb_dim = 10
dim = 8
coord_hidden = 5
[train]
epochs = 3
batch_size = 4
ratio = 0.25
[train.loss]
rep_neighbors = 3
rep_radius = 0.1
[data]
n_shapes = 4
n_points = 32
per_kind = 4
test_per_kind = 2
[transfer]
epochs = 3
"""


@pytest.fixture
def toy(tmp_path):
    path = tmp_path / "toy.toml"
    path.write_text(TOY_TOML)
    return str(path)


@pytest.fixture
def trained(tmp_path, toy):
    out = tmp_path / "pre"
    assert main(["pretrain", "--config", toy, "--out", str(out)]) == EXIT_OK
    return out


def summary(path):
    return json.loads((path / "summary.json").read_text())


def test_full_scale_preset_dry_run_echoes_published_values(capsys):
    assert main(["pretrain", "--preset", "paper", "--dry-run"]) == EXIT_OK
    cfg = json.loads(capsys.readouterr().out)
    t, m = cfg["train"], cfg["model"]
    assert (t["batch_size"], t["epochs"], t["bn_momentum"], t["lr0"], t["decay_factor"], t["decay_period"]) == (
        32, 120, 0.9, 1e-3, 0.7, 10)
    assert (m["neighbors"], m["dim"], m["enc_widths"], m["emb_dim"]) == (20, 128, [64, 64, 128, 256], 648)
    assert (t["ratio"], t["loss"]["cd_weight"], t["loss"]["rep_weight"]) == (0.125, 100.0, 1.0)


def test_dry_run_writes_nothing(tmp_path, toy):
    out = tmp_path / "never"
    assert main(["pretrain", "--config", toy, "--out", str(out), "--dry-run"]) == EXIT_OK
    assert not out.exists()


def test_pretrain_run_directory(trained):
    assert {p.name for p in trained.iterdir()} >= {"config.json", "seed", "build", "metrics.csv", "summary.json",
                                                    "checkpoints"}
    s = summary(trained)
    assert s["epochs_run"] == 3 and s["steps"] == 3 and s["loss_variant"] == "CD+RL"
    assert (trained / "seed").read_text().strip() == "0"
    load_checkpoint(trained / "checkpoints" / "last.ckpt")


def test_same_seed_same_metrics(tmp_path, toy):
    for name in ("a", "b"):
        assert main(["pretrain", "--config", toy, "--seed", "4", "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_continues_to_the_same_log(tmp_path, toy):
    assert main(["pretrain", "--config", toy, "--set", "train.epochs=5", "--out", str(tmp_path / "full")]) == EXIT_OK
    # a short run of the same configuration stands in for an interruption after two epochs
    part = tmp_path / "part"
    assert main(["pretrain", "--config", toy, "--set", "train.epochs=2", "--out", str(part)]) == EXIT_OK
    cfg = json.loads((part / "config.json").read_text())
    cfg["train"]["epochs"] = 5
    (part / "config.json").write_text(json.dumps(cfg))
    assert main(["pretrain", "--config", toy, "--set", "train.epochs=5", "--out", str(part), "--resume"]) == EXIT_OK
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()


def test_resume_refuses_a_different_configuration(tmp_path, toy, trained, capsys):
    code = main(["pretrain", "--config", toy, "--set", "train.lr0=0.01", "--out", str(trained), "--resume"])
    assert code == EXIT_USAGE
    assert "differs" in capsys.readouterr().err


def test_existing_output_directory_is_not_overwritten(toy, trained):
    assert main(["pretrain", "--config", toy, "--out", str(trained)]) == EXIT_USAGE


def test_set_loss_variant_recorded(tmp_path, toy):
    out = tmp_path / "emd"
    assert main(["pretrain", "--config", toy, "--set", "train.loss.variant=EMD+RL", "--out", str(out)]) == EXIT_OK
    s = summary(out)
    assert s["loss_variant"] == "EMD+RL" and s["config"]["train"]["loss"]["variant"] == "EMD+RL"


def test_probe_reports_pretrained_and_random_runs(tmp_path, toy, trained, capsys):
    out = tmp_path / "probe"
    ck = str(trained / "checkpoints" / "last.ckpt")
    assert main(["probe", "--config", toy, "--checkpoint", ck, "--out", str(out)]) == EXIT_OK
    s = summary(out)
    assert set(s["runs"]) == {"pretrained", "random"}
    assert s["encoder_tensors_changed"] == 0
    assert "probe random" in capsys.readouterr().out


def test_finetune_updates_the_encoder(tmp_path, toy, trained):
    out = tmp_path / "ft"
    ck = str(trained / "checkpoints" / "last.ckpt")
    assert main(["finetune", "--config", toy, "--checkpoint", ck, "--out", str(out)]) == EXIT_OK
    s = summary(out)
    assert s["encoder_tensors_changed"] > 0 and set(s["runs"]) == {"pretrained"}


def test_segmentation_probe(tmp_path, toy, trained):
    out = tmp_path / "seg"
    ck = str(trained / "checkpoints" / "last.ckpt")
    code = main(["probe", "--config", toy, "--checkpoint", ck, "--set", "transfer.head=segmentation",
                 "--out", str(out)])
    assert code == EXIT_OK
    assert summary(out)["runs"]["pretrained"]["metric"] == "miou"


def test_missing_checkpoint_is_a_data_error(tmp_path, toy, capsys):
    code = main(["probe", "--config", toy, "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "p")])
    assert code == EXIT_DATA
    assert "not found" in capsys.readouterr().err
    assert main(["probe", "--config", toy, "--out", str(tmp_path / "q")]) == EXIT_USAGE


def test_corrupt_checkpoint_is_a_data_error(tmp_path, toy, trained):
    ck = trained / "checkpoints" / "last.ckpt"
    raw = bytearray(ck.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    assert main(["probe", "--config", toy, "--checkpoint", str(bad), "--out", str(tmp_path / "p")]) == EXIT_DATA


def test_upsample_with_analytic_reference(tmp_path, trained):
    rng = np.random.default_rng(0)
    v = rng.standard_normal((32, 3))
    save_xyz(0.5 * v / np.linalg.norm(v, axis=1, keepdims=True), tmp_path / "in.xyz")
    out = tmp_path / "up"
    code = main(["upsample", str(tmp_path / "in.xyz"), "--checkpoint", str(trained / "checkpoints" / "last.ckpt"),
                 "--reference", "sphere:radius=0.5", "--out", str(out)])
    assert code == EXIT_OK
    s = summary(out)
    assert s["output_points"] == 128 and s["input_points"] == 32
    assert set(s["metrics"]) >= {"cd", "hd", "nn_cv", "p2f"}
    assert load_xyz(out / "upsampled.xyz").points.shape == (128, 3)


def test_upsample_rejects_foreign_ratio(tmp_path, trained):
    save_xyz(np.random.default_rng(0).random((32, 3)), tmp_path / "in.xyz")
    code = main(["upsample", str(tmp_path / "in.xyz"), "--checkpoint", str(trained / "checkpoints" / "last.ckpt"),
                 "--ratio", "0.5", "--out", str(tmp_path / "up")])
    assert code == EXIT_USAGE


def test_upsample_512_to_4096_against_sphere(tmp_path):
    """Full architecture at the default ratio: 512 input points come back as 4096."""
    from puae.data_io import save_checkpoint
    from puae.model import UAE

    model = UAE(seed=0)
    ck = tmp_path / "init.ckpt"
    save_checkpoint(ck, arch=model.arch, params=model.params, bn_state=model.bn_state,
                    meta={"train": {"ratio": 0.125}})
    v = np.random.default_rng(1).standard_normal((512, 3))
    save_xyz(0.5 * v / np.linalg.norm(v, axis=1, keepdims=True), tmp_path / "in.xyz")
    out = tmp_path / "up"
    code = main(["upsample", str(tmp_path / "in.xyz"), "--checkpoint", str(ck), "--reference", "sphere:radius=0.5",
                 "--out", str(out)])
    assert code == EXIT_OK
    s = summary(out)
    assert s["output_points"] == 4096 and np.isfinite(s["metrics"]["p2f"])


def test_eval_command(tmp_path, capsys):
    pts = np.random.default_rng(0).random((20, 3))
    save_xyz(pts, tmp_path / "a.xyz")
    assert main(["eval", str(tmp_path / "a.xyz"), "--target", str(tmp_path / "a.xyz")]) == EXIT_OK
    metrics = json.loads(capsys.readouterr().out)["metrics"]
    assert metrics["cd"] == 0.0 and metrics["hd"] == 0.0 and metrics["emd"] == 0.0
    save_xyz(np.array([[0.0, 0.0, 2.0], [2.0, 2.0, 2.0]]), tmp_path / "b.xyz")
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "b.xyz"), "--reference", "cube:half_extent=1.0"]) == EXIT_OK
    p2f = json.loads(capsys.readouterr().out)["metrics"]["p2f"]
    assert abs(p2f - (1.0 + np.sqrt(3.0)) / 2) < 1e-12
    assert main(["eval", str(tmp_path / "a.xyz"), "--reference", "cube:side=1"]) == EXIT_USAGE
    assert main(["eval", str(tmp_path / "a.xyz")]) == EXIT_USAGE


def test_eval_on_malformed_file(tmp_path, capsys):
    (tmp_path / "bad.xyz").write_text("1 2 3\n1 2\n")
    assert main(["eval", str(tmp_path / "bad.xyz"), "--target", str(tmp_path / "bad.xyz")]) == EXIT_DATA
    assert "bad.xyz:2:" in capsys.readouterr().err


@pytest.mark.parametrize("scope", ["primitives", "layers"])
def test_gradcheck_scopes_pass(scope, capsys):
    assert main(["gradcheck", scope]) == EXIT_OK
    assert "within 0.0001" in capsys.readouterr().out


def test_gradcheck_failure_exit_code(monkeypatch, capsys):
    from puae import gradcheck

    monkeypatch.setattr(gradcheck, "run", lambda scope: [("fake", 1.0)])
    assert main(["gradcheck", "primitives"]) == EXIT_FAIL
    assert "fake" in capsys.readouterr().err


def test_gradcheck_unknown_scope_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["gradcheck", "everything"])
    assert exc.value.code == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, toy, capsys):
    code = main(["pretrain", "--config", toy, "--set", "train.lr0=1e300", "--set", "train.epochs=4",
                 "--out", str(tmp_path / "boom")])
    assert code == EXIT_NUMERIC
    assert "non-finite" in capsys.readouterr().err


def test_ablate_requires_axes(toy, capsys):
    assert main(["ablate", "--config", toy]) == EXIT_USAGE
    assert "no axes specified" in capsys.readouterr().err
    assert main(["ablate", "--config", toy, "--axis", "depth=1,2"]) == EXIT_USAGE


def test_ablate_grid(tmp_path, toy):
    out = tmp_path / "ab"
    code = main(["ablate", "--config", toy, "--axis", "ratio=0.25,0.5", "--axis", "loss.variant=CD,CD+RL",
                 "--out", str(out)])
    assert code == EXIT_OK
    rows = (out / "ablation.csv").read_text().strip().splitlines()
    assert len(rows) == 5
    assert all(",ok," in r for r in rows[1:])


def test_ablate_isolates_failing_cells(tmp_path, toy):
    out = tmp_path / "ab"
    # r = 0.3 has no integer expansion factor, so that cell fails while the other runs
    assert main(["ablate", "--config", toy, "--axis", "ratio=0.25,0.3", "--out", str(out)]) == EXIT_OK
    cells = summary(out)["cells"]
    assert [c["status"] for c in cells] == ["ok", "failed"]
    assert cells[1]["error"]


def test_axis_parsing_helpers():
    axes = parse_axes(["strategy=random,fps,local", "ratio=0.125"])
    assert axes == {"strategy": ["random", "fps", "local"], "ratio": [0.125]}
    assert len(grid_cells({"a": [1, 2], "b": [3, 4, 5]})) == 6
    assert parse_value("[1, 2]") == [1, 2] and parse_value("CD+RL") == "CD+RL" and parse_value("true") is True


def test_bad_overrides_are_usage_errors(toy, capsys):
    assert main(["pretrain", "--config", toy, "--set", "nope=1", "--dry-run"]) == EXIT_USAGE
    assert main(["pretrain", "--config", toy, "--set", "train.ratio=0", "--dry-run"]) == EXIT_USAGE
    assert main(["pretrain", "--config", toy, "--set", "noequals", "--dry-run"]) == EXIT_USAGE
    assert main(["pretrain", "--config", "/nonexistent.toml", "--dry-run"]) == EXIT_DATA


def test_config_helpers_raise_config_error():
    from puae.cli import default_config, set_dotted

    cfg = default_config("desk")
    set_dotted(cfg, "loss.cd_weight", 5.0)  # bare keys resolve to their section
    assert cfg["train"]["loss"]["cd_weight"] == 5.0
    with pytest.raises(ConfigError):
        set_dotted(cfg, "train", 1)
    with pytest.raises(ConfigError):
        default_config("huge")
