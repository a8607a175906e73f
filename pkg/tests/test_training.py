import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from puae import tensor as T
from puae.data_io import load_checkpoint, make_synthetic_dataset
from puae.errors import CardinalityError, ConfigError, LabelMismatchError, NonFiniteError
from puae.geometry import LossConfig, PointCloud, chamfer_distance, repulsion_loss
from puae.model import ArchConfig, UAE
from puae.tensor import Tensor, finite_difference_check
from puae.training import (
    CSV_FIELDS,
    MetricsSink,
    OptimizerState,
    TrainConfig,
    accuracy,
    adam_step,
    augment,
    cross_entropy,
    lr_at,
    part_miou,
    preset,
    pretrain,
    sgd_step,
    total_loss,
    transfer,
)

TOY = ArchConfig(neighbors=4, enc_widths=(4, 4, 6, 6), emb_dim=10, dim=8, coord_hidden=5, cls_hidden=(6,),
                 seg_hidden=(6,), num_classes=3, num_parts=7)


# -------------------------------------------------------------------- Adam


def reference_adam(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar-loop Adam, kept deliberately naive."""
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w = w - lr * mhat / (np.sqrt(vhat) + eps)
    return w


def test_adam_matches_reference_over_several_steps():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(6)]
    params, state = {"w": w0}, OptimizerState()
    for g in grads:
        params, state = adam_step(params, {"w": g}, state, 0.01)
    np.testing.assert_allclose(params["w"], reference_adam(w0, grads, 0.01), rtol=1e-12)
    assert state.step == 6


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    fresh, _ = adam_step({"w": np.array([1.0, -2.0])}, {"w": np.zeros(2)}, OptimizerState(), 0.1)
    assert fresh["w"].tolist() == [1.0, -2.0]
    params, state = adam_step({"w": np.array([1.0, -2.0])}, {"w": np.array([0.5, 0.5])}, OptimizerState(), 0.1)
    m_before, v_before = state.m["w"].copy(), state.v["w"].copy()
    _, state = adam_step(params, {"w": np.zeros(2)}, state, 0.1)
    np.testing.assert_allclose(state.m["w"], 0.9 * m_before, rtol=1e-15)
    np.testing.assert_allclose(state.v["w"], 0.999 * v_before, rtol=1e-15)


def test_adam_quadratic_convergence():
    params, state = {"w": np.array([1.0])}, OptimizerState()
    for _ in range(200):
        params, state = adam_step(params, {"w": 2 * params["w"]}, state, 0.1)
    assert abs(params["w"][0]) < 1e-3


@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3), st.floats(1e-4, 1.0))
def test_adam_first_step_is_lr_times_sign(g, lr):
    params, _ = adam_step({"w": np.array([0.0])}, {"w": np.array([g])}, OptimizerState(), lr)
    assert abs(params["w"][0] + lr * np.sign(g)) <= lr * 1e-5


@given(hnp.arrays(np.float64, (3, 2), elements=st.floats(-1e6, 1e6)),
       hnp.arrays(np.float64, (3, 2), elements=st.floats(-1e6, 1e6)))
def test_adam_zero_lr_is_identity(w, g):
    params, state = adam_step({"w": w}, {"w": g}, OptimizerState(), 0.0)
    assert np.array_equal(params["w"], w)
    assert state.step == 1


def test_optimizer_rejects_non_finite_gradients():
    with pytest.raises(NonFiniteError, match="enc.W"):
        adam_step({"enc.W": np.ones(2)}, {"enc.W": np.array([1.0, np.inf])}, OptimizerState(), 0.1)
    with pytest.raises(NonFiniteError, match="b"):
        sgd_step({"b": np.ones(2)}, {"b": np.array([np.nan, 1.0])}, OptimizerState(kind="sgd"), 0.1)


def test_adam_leaves_inputs_untouched():
    w = np.array([1.0, 2.0])
    state = OptimizerState()
    adam_step({"w": w}, {"w": np.ones(2)}, state, 0.5)
    assert w.tolist() == [1.0, 2.0] and state.step == 0 and state.m == {}


def test_sgd_momentum():
    params, state = {"w": np.array([1.0])}, OptimizerState(kind="sgd", momentum=0.5)
    params, state = sgd_step(params, {"w": np.array([2.0])}, state, 0.1)
    params, state = sgd_step(params, {"w": np.array([2.0])}, state, 0.1)
    # velocity 2 then 3
    np.testing.assert_allclose(params["w"], [1.0 - 0.2 - 0.3])


# ---------------------------------------------------------------- schedule


def test_step_schedule_exact_values():
    cfg = preset("paper")
    assert lr_at(0, cfg) == 1e-3
    assert lr_at(10, cfg) == 7e-4
    assert lr_at(25, cfg) == 4.9e-4
    assert lr_at(9, cfg) == 1e-3


def test_cosine_schedule_endpoints():
    cfg = preset("sgd-probe")
    assert lr_at(0, cfg) == pytest.approx(1e-2)
    assert lr_at(cfg.epochs, cfg) == pytest.approx(1e-4)
    assert lr_at(cfg.epochs // 2, cfg) == pytest.approx(0.5 * (1e-2 + 1e-4))
    seq = [lr_at(e, cfg) for e in range(cfg.epochs + 1)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    assert preset("sgd-finetune").lr0 == 1e-1 and preset("sgd-finetune").lr_min == 1e-3
    with pytest.raises(ConfigError):
        lr_at(-1, cfg)


def test_full_scale_preset_values():
    cfg = preset("paper")
    assert (cfg.lr0, cfg.decay_factor, cfg.decay_period, cfg.epochs, cfg.batch_size, cfg.ratio, cfg.bn_momentum) == (
        1e-3, 0.7, 10, 120, 32, 0.125, 0.9)
    assert (cfg.loss.cd_weight, cfg.loss.rep_weight, cfg.optimizer) == (100.0, 1.0, "adam")


@pytest.mark.parametrize(
    "bad", [{"lr0": 0.0}, {"decay_factor": 1.5}, {"decay_factor": 0.0}, {"batch_size": 0}, {"ratio": 0.0},
            {"schedule": "linear"}, {"optimizer": "rmsprop"}, {"input_dropout": 1.0}, {"precision": "float16"}]
)
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_train_config_dict_round_trip():
    cfg = preset("desk", seed=3, scale_range=(0.67, 1.5), loss={"variant": "EMD+RL"})
    back = TrainConfig.from_dict(cfg.to_dict())
    assert back == cfg
    with pytest.raises(ConfigError, match="unknown training keys"):
        TrainConfig.from_dict({**cfg.to_dict(), "lr": 1.0})
    with pytest.raises(ConfigError):
        preset("fast")


# ------------------------------------------------------------- augmentation


def test_augment_all_off_is_identity():
    pts = np.random.default_rng(0).random((50, 3))
    out = augment(PointCloud(pts), np.random.default_rng(1), TrainConfig())
    assert np.array_equal(out.points, pts)


def test_augment_scale_only_scales_bounding_box():
    pts = np.random.default_rng(0).random((50, 3)) - 0.5
    cfg = TrainConfig(scale_range=(0.67, 1.5))
    out = augment(pts, np.random.default_rng(7), cfg)
    factors = np.random.default_rng(7).uniform(0.67, 1.5, size=3)
    np.testing.assert_allclose(out.max(axis=0), pts.max(axis=0) * factors, rtol=1e-15)
    np.testing.assert_allclose(out.min(axis=0), pts.min(axis=0) * factors, rtol=1e-15)
    assert np.all((factors >= 0.67) & (factors <= 1.5))


def test_augment_translation_in_range():
    pts = np.zeros((10, 3))
    for seed in range(20):
        out = augment(pts, np.random.default_rng(seed), TrainConfig(translate=0.2))
        shift = out[0]
        assert np.all(np.abs(shift) <= 0.2) and np.all(out == shift)


def test_augment_dropout_keeps_count_and_fills_with_first_survivor():
    pts = np.arange(300.0).reshape(100, 3)
    out = augment(pts, np.random.default_rng(3), TrainConfig(input_dropout=0.5))
    assert out.shape == pts.shape
    changed = np.any(out != pts, axis=1)
    assert 20 < changed.sum() < 80
    survivors = np.flatnonzero(~changed)
    assert np.all(out[changed] == pts[survivors[0]])
    assert np.array_equal(augment(pts, np.random.default_rng(3), TrainConfig(input_dropout=0.0)), pts)


def test_augment_deterministic_under_seed():
    pts = np.random.default_rng(0).random((30, 3))
    cfg = TrainConfig(translate=0.2, scale_range=(0.67, 1.5), input_dropout=0.2)
    a = augment(pts, np.random.default_rng(11), cfg)
    b = augment(pts, np.random.default_rng(11), cfg)
    assert np.array_equal(a, b)


# --------------------------------------------------------------------- loss


def test_total_loss_identical_clouds():
    x = np.random.default_rng(0).random((20, 3))
    assert total_loss(Tensor(x), x, LossConfig(variant="CD")).item() == 0.0
    rl = LossConfig(variant="CD+RL", rep_neighbors=3, rep_radius=0.3)
    assert total_loss(Tensor(x), x, rl).item() == rl.rep_weight * repulsion_loss(x, 3, 0.3).item()


def test_total_loss_single_point_pair():
    pred = Tensor(np.zeros((1, 3)))
    assert total_loss(pred, np.array([[1.0, 0.0, 0.0]]), LossConfig(variant="CD")).item() == 200.0


def test_total_loss_emd_requires_equal_sizes():
    with pytest.raises(CardinalityError):
        total_loss(Tensor(np.zeros((4, 3))), np.zeros((5, 3)), LossConfig(variant="EMD"))


@given(hnp.arrays(np.float64, (6, 3), elements=st.floats(-1, 1)), hnp.arrays(np.float64, (9, 3), elements=st.floats(-1, 1)),
       st.floats(0, 1000))
def test_cd_variant_is_exactly_alpha_times_chamfer(p, x, cd_weight):
    value = total_loss(Tensor(p), x, LossConfig(cd_weight=cd_weight, variant="CD")).item()
    assert value == np.float64(chamfer_distance(p, x).data) * cd_weight


def test_weighted_loss_gradient():
    x = np.random.default_rng(1).random((10, 3))
    cfg = LossConfig(cd_weight=100.0, rep_weight=1.0, rep_neighbors=3, rep_radius=0.3)
    assert finite_difference_check(lambda p: total_loss(p, x, cfg), np.random.default_rng(2).random((10, 3)), 1e-5) < 1e-4


# ----------------------------------------------------------- classification


def test_cross_entropy_matches_manual_and_gradient():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 3)) * 3
    labels = np.array([0, 2, 1, 2])
    shifted = logits - logits.max(axis=1, keepdims=True)
    manual = -np.mean(shifted[np.arange(4), labels] - np.log(np.exp(shifted).sum(axis=1)))
    assert abs(cross_entropy(Tensor(logits), labels).item() - manual) < 1e-12
    assert finite_difference_check(lambda z: cross_entropy(z, labels), logits, 1e-5) < 1e-4


def test_part_miou_examples():
    space = {0: [0, 1]}
    gt = np.array([0, 0, 1, 1])
    assert part_miou([gt], [gt], [0], space) == 1.0
    # part 0: |{0,1}| / |{0,1,2,3}| = 0.5; part 1: nothing predicted -> 0
    assert part_miou([np.zeros(4, dtype=int)], [gt], [0], space) == 0.25
    assert part_miou([np.zeros(4, dtype=int)], [np.zeros(4, dtype=int)], [0], space) == 1.0
    assert accuracy([1, 2, 0], [1, 0, 0]) == pytest.approx(2 / 3)


# ------------------------------------------------------------------ pretrain


def tiny_data(n=4, points=32, seed=0):
    return make_synthetic_dataset(kinds=("sphere", "cube"), n_shapes=n, n_points=points, seed=seed)


def tiny_cfg(**kw):
    base = dict(ratio=0.25, epochs=3, batch_size=2, decay_period=2, loss={"rep_neighbors": 3, "rep_radius": 0.1})
    base.update(kw)
    return preset("desk", **base)


def test_zero_lr_inside_loop_leaves_params_unchanged(monkeypatch):
    from puae import training

    model = UAE(TOY, seed=0)
    before = {k: v.copy() for k, v in model.params.items()}
    seen = []
    monkeypatch.setattr(training, "lr_at", lambda epoch, cfg: 0.0)
    res = pretrain(tiny_data(2), model, tiny_cfg(epochs=1), on_step=lambda s, info: seen.append(info["lr"]))
    assert seen == [0.0]
    assert all(np.array_equal(before[k], model.params[k]) for k in before)
    assert len(res.log) == 1 and np.isfinite(float(res.log[0]["loss"]))


def test_pretrain_logs_and_reduces_loss(tmp_path):
    model = UAE(TOY, seed=1, dtype=np.float64)
    res = pretrain(tiny_data(), model, tiny_cfg(epochs=30, lr0=1e-2, decay_period=100, precision="float64"),
                   sink=MetricsSink(tmp_path / "m.csv"))
    assert [int(r["epoch"]) for r in res.log] == list(range(30))
    assert float(res.log[-1]["cd"]) < float(res.log[0]["cd"])
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == CSV_FIELDS and len(rows) == 30


def test_pretrain_same_seed_bit_identical(tmp_path):
    for run in ("a", "b"):
        pretrain(tiny_data(), UAE(TOY, seed=2), tiny_cfg(seed=5), sink=MetricsSink(tmp_path / f"{run}.csv"))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_pretrain_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = tiny_cfg(epochs=6, seed=9, translate=0.1, input_dropout=0.1)
    full = UAE(TOY, seed=3)
    pretrain(tiny_data(), full, cfg, sink=MetricsSink(tmp_path / "full.csv"), checkpoint_dir=tmp_path / "full")

    part = UAE(TOY, seed=3)
    pretrain(tiny_data(), part, cfg, sink=MetricsSink(tmp_path / "part.csv"), checkpoint_dir=tmp_path / "part",
             stop_after=2)
    resumed = UAE(TOY, seed=99)  # different init: everything must come from the checkpoint
    pretrain(tiny_data(), resumed, cfg, sink=MetricsSink(tmp_path / "part.csv"), checkpoint_dir=tmp_path / "part",
             resume_from=tmp_path / "part" / "last.ckpt")
    assert (tmp_path / "full.csv").read_bytes() == (tmp_path / "part.csv").read_bytes()
    assert all(np.array_equal(full.params[k], resumed.params[k]) for k in full.params)


def test_checkpoint_cadence(tmp_path):
    pretrain(tiny_data(), UAE(TOY, seed=0), tiny_cfg(epochs=4, checkpoint_every=2), checkpoint_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["epoch_00001.ckpt", "epoch_00003.ckpt", "last.ckpt"]
    ck = load_checkpoint(tmp_path / "last.ckpt", expected_arch=TOY)
    assert ck.meta["epoch"] == 3 and ck.optimizer["step"] == 8


def test_non_finite_loss_aborts_and_keeps_last_good_checkpoint(tmp_path):
    model = UAE(TOY, seed=0)
    cfg = tiny_cfg(epochs=2)
    pretrain(tiny_data(), model, cfg, checkpoint_dir=tmp_path)
    good = (tmp_path / "last.ckpt").read_bytes()
    model.params["decoder.coord1.b"] = np.full_like(model.params["decoder.coord1.b"], np.nan)
    with pytest.raises(NonFiniteError):
        pretrain(tiny_data(), model, tiny_cfg(epochs=4), checkpoint_dir=tmp_path)
    assert (tmp_path / "last.ckpt").read_bytes() == good


def test_pretrain_emd_variant_runs():
    res = pretrain(tiny_data(2), UAE(TOY, seed=0), tiny_cfg(epochs=1, loss={"variant": "EMD+RL", "rep_neighbors": 3}))
    assert np.isfinite(float(res.log[0]["cd"])) and np.isfinite(float(res.log[0]["loss"]))


# ------------------------------------------------------------------ transfer


def labelled(seed, n=6, parts=False):
    return make_synthetic_dataset(kinds=("sphere", "cube", "torus"), n_shapes=n, n_points=32, seed=seed,
                                  with_parts=parts)


def transfer_cfg(**kw):
    return TrainConfig(**{**dict(lr0=1e-2, lr_min=1e-4, schedule="cosine", epochs=3, batch_size=3), **kw})


def test_probe_keeps_encoder_bit_identical():
    model = UAE(TOY, seed=0)
    before = {k: v.copy() for k, v in model.params.items()}
    bn_before = {k: (m.copy(), v.copy()) for k, (m, v) in model.bn_state.items()}
    res = transfer(labelled(0), labelled(1), model, "probe", "classification", transfer_cfg())
    for k in before:
        if k.startswith("encoder"):
            assert np.array_equal(before[k], model.params[k])
    assert any(not np.array_equal(before[k], model.params[k]) for k in before if k.startswith("cls."))
    for k, (m, v) in bn_before.items():
        assert np.array_equal(m, model.bn_state[k][0]) and np.array_equal(v, model.bn_state[k][1])
    assert res.metric == "accuracy" and 0.0 <= res.test_score <= 1.0


def test_probe_with_augmentation_still_frozen():
    model = UAE(TOY, seed=0)
    before = {k: v.copy() for k, v in model.params.items() if k.startswith("encoder")}
    transfer(labelled(0), labelled(1), model, "probe", "classification",
             transfer_cfg(translate=0.2, scale_range=(0.67, 1.5), input_dropout=0.1))
    assert all(np.array_equal(v, model.params[k]) for k, v in before.items())


def test_finetune_changes_every_encoder_and_head_tensor():
    model = UAE(TOY, seed=0)
    before = {k: v.copy() for k, v in model.params.items()}
    transfer(labelled(0), labelled(1), model, "finetune", "classification", transfer_cfg())
    for k in before:
        if k.startswith(("encoder", "cls.")):
            assert not np.array_equal(before[k], model.params[k]), k
        elif k.startswith("decoder"):
            assert np.array_equal(before[k], model.params[k]), k


def test_segmentation_probe_reports_miou():
    model = UAE(TOY, seed=0)
    res = transfer(labelled(0, parts=True), labelled(1, parts=True), model, "probe", "segmentation", transfer_cfg())
    assert res.metric == "miou" and 0.0 <= res.test_score <= 1.0


def test_label_mismatch_errors():
    small = ArchConfig(**{**TOY.to_dict(), "num_classes": 2, "enc_widths": (4, 4, 6, 6), "cls_hidden": (6,),
                          "seg_hidden": (6,)})
    with pytest.raises(LabelMismatchError):
        transfer(labelled(0), labelled(1), UAE(small, seed=0), "probe", "classification", transfer_cfg())
    with pytest.raises(LabelMismatchError):
        transfer(labelled(0), labelled(1), UAE(TOY, seed=0), "probe", "segmentation", transfer_cfg())
    with pytest.raises(ConfigError):
        transfer(labelled(0), labelled(1), UAE(TOY, seed=0), "distill", "classification", transfer_cfg())


def test_cross_entropy_probe_gradients_reach_only_head():
    model = UAE(TOY, seed=0, dtype=np.float64)
    fw = model.forward(training=True, rng=np.random.default_rng(0), frozen=("encoder", "decoder"))
    from puae.model import classification_head, encoder_forward

    logits = classification_head(fw, encoder_forward(fw, np.random.default_rng(1).random((2, 12, 3)), TOY), TOY)
    grads = T.backward(cross_entropy(logits, np.array([0, 2])), fw.trainable())
    assert set(grads) == {k for k in model.params if k.startswith("cls.")}
