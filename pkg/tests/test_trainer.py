from dataclasses import replace

import numpy as np
import pytest
import torch

from mtsh import codecs
from mtsh.network import build_model
from mtsh.synthetic import SyntheticFigureParams, generate_synthetic
from mtsh.trainer import (
    LOG_HEADER,
    CheckpointError,
    TrainConfig,
    TrainingAborted,
    checkpoint_bytes,
    evaluate,
    evaluate_predictions,
    load_checkpoint,
    make_model,
    make_optimizer,
    new_state,
    save_checkpoint,
    train,
)
from mtsh.vocab import TaskKind, parse_task_set

import oracles


def test_config_validation_and_serialisation():
    cfg = TrainConfig(seed=3, grad_clip=1.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"epochs": -1}, {"batch_size": 0}, {"learning_rate": 0.0}, {"rms_alpha": 1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epoch": 3})


def test_update_rule_matches_scalar_reference():
    cfg = TrainConfig(learning_rate=0.01, rms_alpha=0.9, rms_eps=1e-8)
    p = torch.nn.Parameter(torch.tensor(0.7, dtype=torch.float64))
    opt = make_optimizer(torch.nn.ParameterList([p]), cfg)
    grads = [0.3, -1.2, 0.05, 2.0, 0.0, -0.4, 1e-6, 7.5]
    want = oracles.rmsprop_scalar(0.7, grads, 0.01, 0.9, 1e-8)
    for g, w in zip(grads, want):
        p.grad = torch.tensor(g, dtype=torch.float64)
        opt.step()
        assert abs(p.item() - w) <= 1e-12


def test_quadratic_toy_converges():
    p = torch.nn.Parameter(torch.tensor(3.0, dtype=torch.float64))
    opt = make_optimizer(torch.nn.ParameterList([p]), TrainConfig(learning_rate=1e-2))
    for step in range(500):
        opt.zero_grad()
        ((p - 1.25) ** 2).backward()
        opt.step()
        if abs(p.item() - 1.25) < 1e-3:
            break
    assert abs(p.item() - 1.25) < 1e-3 and step < 500


def _state(tiny_config, tasks="2d+seg", **kw):
    cfg = TrainConfig(epochs=5, batch_size=4, **kw)
    return new_state(make_model(parse_task_set(tasks), tiny_config, 0), cfg)


def test_zero_epochs_is_a_no_op(tiny_config, small_samples):
    st = _state(tiny_config)
    before = [p.detach().clone() for p in st.model.parameters()]
    st = new_state(st.model, replace(st.config, epochs=0))
    train(st, small_samples)
    assert st.step == 0 and all(torch.equal(a, b) for a, b in zip(before, st.model.parameters()))


def test_log_lines(tiny_config, small_samples):
    st = _state(tiny_config)
    train(st, small_samples, max_steps=2)
    assert LOG_HEADER == "step, epoch, stack, task, loss, wallclock_ms"
    assert len(st.log) == 2 * 2 * 2
    step, epoch, stack, task, loss, ms = st.log[-1].split(", ")
    assert (step, epoch, stack, task) == ("1", "0", "2", "seg") and float(loss) > 0 and float(ms) >= 0


def test_resume_equivalence(tiny_config, small_samples, tmp_path):
    full = _state(tiny_config)
    train(full, small_samples, max_steps=10)  # crosses an epoch boundary (3 steps per epoch)
    part = _state(tiny_config)
    train(part, small_samples, max_steps=5)
    save_checkpoint(part, tmp_path / "c.pt")
    torch.manual_seed(12345)  # disturb global RNG; the checkpoint must restore it
    resumed = load_checkpoint(tmp_path / "c.pt")
    train(resumed, small_samples, max_steps=10)
    for a, b in zip(full.model.state_dict().values(), resumed.model.state_dict().values()):
        assert torch.equal(a, b)
    assert resumed.step == full.step == 10


def test_checkpoint_round_trip_is_byte_stable(tiny_config, small_samples, tmp_path):
    st = _state(tiny_config)
    train(st, small_samples, max_steps=2)
    st.best_metric = 42.0
    p = save_checkpoint(st, tmp_path / "a.pt")
    back = load_checkpoint(p)
    assert checkpoint_bytes(back) == p.read_bytes()
    assert back.best_metric == 42.0 and back.config == st.config


def test_checkpoint_errors(tiny_config, tmp_path):
    st = _state(tiny_config)
    p = save_checkpoint(st, tmp_path / "a.pt")
    with pytest.raises(CheckpointError, match="2d\\+seg"):
        load_checkpoint(p, expected_tasks=parse_task_set("2d"))
    broken = tmp_path / "broken.pt"
    broken.write_bytes(p.read_bytes()[:200])
    with pytest.raises(CheckpointError):
        load_checkpoint(broken)
    payload = torch.load(p, weights_only=True)
    payload["meta"] = payload["meta"].replace('"format_version": 1', '"format_version": 99')
    torch.save(payload, tmp_path / "v.pt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.pt")


def test_non_finite_prediction_aborts_with_location(tiny_config, small_samples):
    st = _state(tiny_config)
    with torch.no_grad():
        st.model.stream["seg"]["stack2"].head.bias.fill_(float("nan"))
    with pytest.raises(TrainingAborted, match="stack 2, task seg"):
        train(st, small_samples, max_steps=1)


def test_evaluate_rejects_empty(tiny_config):
    with pytest.raises(ValueError):
        evaluate(build_model(parse_task_set("2d"), tiny_config), [])


def test_oracle_predictions_hit_upper_bound():
    small_samples = generate_synthetic(SyntheticFigureParams(seed=8, size=256), 6)
    tasks = parse_task_set("2d+seg+depth+3d")
    r, in_res = 64, 256
    preds = []
    for s in small_samples:
        b = codecs.encode_sample(s, tasks, r)
        preds.append({t: b[t] * 100.0 for t in tasks})
    rep = evaluate_predictions(tasks, preds, small_samples)
    assert rep.sections["2d"].summary["Mean"] == 100.0
    seg = rep.sections["seg"].values
    assert np.all(seg[np.isfinite(seg)] == 100.0)
    assert np.all(rep.sections["depth"].values[np.isfinite(rep.sections["depth"].values)] == 0.0)
    assert rep.sections["depth"].summary["Mean Full Body"] == 0.0
    s = in_res // r
    for sample, pred in zip(small_samples, preds):
        q = codecs.fit_pose3d_quantizer(sample.depth, sample.part_mask, sample.joints3d, sample.visible)
        got = codecs.decode_pose3d(pred[TaskKind.POSE3D], sample.intrinsics, q, in_res)
        cam, gt = sample.intrinsics, sample.joints3d
        for j in np.flatnonzero(sample.visible):
            dz = abs(got[j, 2] - gt[j, 2])
            assert dz <= q.bin_width / 2 + 1e-9
            u, v = cam.project(gt[j])
            bx = (s / 2) * got[j, 2] / cam.fx + abs(u - cam.cx) * dz / cam.fx
            by = (s / 2) * got[j, 2] / cam.fy + abs(v - cam.cy) * dz / cam.fy
            assert abs(got[j, 0] - gt[j, 0]) <= bx + 1e-6 and abs(got[j, 1] - gt[j, 1]) <= by + 1e-6


def test_untrained_model_favours_background(tiny_config, small_samples):
    torch.manual_seed(0)
    model = build_model(parse_task_set("seg"), tiny_config)
    rep = evaluate(model, small_samples)
    iou = rep.sections["seg"].values
    assert iou[0] > np.nanmax(np.nan_to_num(iou[1:], nan=-1.0))
    again = evaluate(model, small_samples)
    assert again.to_csv() == rep.to_csv()
    assert "2d" not in rep and "3d" not in rep
