import pytest
import torch

from mtsh.network import (
    HourglassConfig,
    Hourglass,
    StackedHourglass,
    build_model,
    checkpoint_name,
    latent_size,
    load_named_state,
    named_state,
    parameter_count,
)
from mtsh.vocab import TaskKind, all_task_sets, parse_task_set

from oracles import model_params


def _images(cfg, n=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, cfg.input_resolution, cfg.input_resolution, generator=g)


def test_config_validation():
    with pytest.raises(ValueError):
        HourglassConfig(resolution=24, depth=4, input_resolution=96)
    with pytest.raises(ValueError):
        HourglassConfig(resolution=64, input_resolution=128)
    with pytest.raises(ValueError):
        HourglassConfig(num_stacks=0)
    assert latent_size(HourglassConfig()) == 4
    assert Hourglass(4, 8).resolutions(64) == [64, 32, 16, 8, 4]


def test_all_task_sets_forward_shapes(tiny_config):
    x = _images(tiny_config)
    for ts in all_task_sets():
        torch.manual_seed(0)
        model = build_model(ts, tiny_config)
        out = model(x)
        assert len(out) == tiny_config.num_stacks
        for preds in out:
            assert set(preds) == set(ts.tasks)
            for t, v in preds.items():
                assert tuple(v.shape) == (2, tiny_config.channels(t), 16, 16)
        assert model.num_fusion_blocks == (tiny_config.num_stacks - 1 if len(ts.tasks) > 1 else 0)


@pytest.mark.parametrize("tasks", ["2d", "seg+depth", "2d+seg+depth+3d"])
@pytest.mark.parametrize("stacks,features,depth", [(1, 8, 2), (2, 16, 3), (3, 8, 1)])
def test_parameter_audit(tasks, stacks, features, depth):
    cfg = HourglassConfig(num_stacks=stacks, features=features, depth=depth, resolution=16, input_resolution=64)
    ts = parse_task_set(tasks)
    model = build_model(ts, cfg)
    assert parameter_count(model) == model_params([cfg.channels(t) for t in ts], features, depth, stacks)


def test_single_task_matches_plain_hourglass(tiny_config):
    torch.manual_seed(5)
    mt = build_model(parse_task_set("seg"), tiny_config)
    torch.manual_seed(5)
    plain = StackedHourglass(tiny_config, tiny_config.channels(TaskKind.PARTSEG))
    a = list(mt.parameters())
    b = list(plain.parameters())
    assert len(a) == len(b) and all(torch.equal(p, q) for p, q in zip(a, b))
    x = _images(tiny_config)
    got = [o[TaskKind.PARTSEG] for o in mt(x)]
    want = plain(x)
    assert all(torch.equal(g, w) for g, w in zip(got, want))


def test_input_validation(tiny_config):
    model = build_model(parse_task_set("2d"), tiny_config)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 3, 32, 32))
    bad = _images(tiny_config, 1)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        model(bad)
    with pytest.raises(TypeError):
        build_model("2d", tiny_config)


def test_named_state_round_trip(tiny_config):
    ts = parse_task_set("2d+depth")
    torch.manual_seed(1)
    a = build_model(ts, tiny_config)
    torch.manual_seed(2)
    b = build_model(ts, tiny_config)
    state = named_state(a)
    assert "stream/2d/stack1/head.weight" in state
    assert "fusion1/depth/mix.conv1.weight" in state
    assert "stem/conv.weight" in state
    load_named_state(b, state)
    assert all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))
    assert checkpoint_name("stream.seg.stack2.lin.bias") == "stream/seg/stack2/lin.bias"


def test_fusion_couples_streams(tiny_config):
    torch.manual_seed(0)
    model = build_model(parse_task_set("2d+seg"), tiny_config)
    out = model(_images(tiny_config))
    loss = out[1][TaskKind.POSE2D].pow(2).sum()
    grads = torch.autograd.grad(loss, list(model.stack_parameters(TaskKind.PARTSEG, 1)), allow_unused=True)
    assert any(g is not None and g.abs().sum() > 0 for g in grads)


def test_checkpoint_names_invert(tiny_config):
    from mtsh.network import torch_name

    model = build_model(parse_task_set("2d+seg+depth+3d"), tiny_config)
    for key in model.state_dict():
        assert torch_name(checkpoint_name(key)) == key
