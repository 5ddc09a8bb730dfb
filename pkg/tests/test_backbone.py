import numpy as np
import pytest
import torch
import torchvision

from errnet.backbone import (
    FEATURE_LOSS_LAYERS,
    LAYER_CHANNELS,
    Backbone,
    BackboneInitError,
    hypercolumn_channels,
)
from errnet.imaging import DimensionError


def test_missing_weights_file_is_an_init_error(tmp_path, monkeypatch):
    monkeypatch.delenv("ERRNET_VGG19_WEIGHTS", raising=False)
    with pytest.raises(BackboneInitError):
        Backbone(tmp_path / "nope.pth")
    with pytest.raises(BackboneInitError):
        Backbone(None)


def test_loads_torchvision_state_dict(tmp_path):
    torch.manual_seed(0)
    ref = torchvision.models.vgg19()
    path = tmp_path / "vgg19.pth"
    torch.save(ref.state_dict(), path)
    bb = Backbone(path)
    assert bb.pretrained
    x = torch.rand(1, 3, 32, 32)
    expected = ref.features[:32](torchvision.transforms.functional.normalize(
        x, [0.485, 0.456, 0.406], [0.229, 0.224, 0.225]))
    got = bb.extract(x, ["conv5_2"])["conv5_2"]
    # ceil-mode pooling only differs for odd sizes
    torch.testing.assert_close(got, expected)


def test_shape_mismatch_in_weights_file(tmp_path):
    state = torchvision.models.vgg19().state_dict()
    state["features.0.weight"] = torch.zeros(1)
    torch.save(state, tmp_path / "bad.pth")
    with pytest.raises(BackboneInitError):
        Backbone(tmp_path / "bad.pth")


def test_extract_shapes_and_channels(backbone):
    x = torch.rand(1, 3, 64, 64)
    feats = backbone.extract(x, FEATURE_LOSS_LAYERS + ("conv1_2",))
    assert set(feats) == set(FEATURE_LOSS_LAYERS) | {"conv1_2"}
    for name, f in feats.items():
        k = int(name[4])
        assert f.shape == (1, LAYER_CHANNELS[name], 64 // 2 ** (k - 1), 64 // 2 ** (k - 1))
    assert feats["conv5_2"].shape[-2:] == (4, 4)
    assert backbone.channels("conv2_2") == 128


def test_odd_sizes_follow_ceil_rule(backbone):
    x = torch.rand(1, 3, 37, 45)
    feats = backbone.extract(x, FEATURE_LOSS_LAYERS)
    for name, f in feats.items():
        k = int(name[4])
        assert f.shape[-2:] == (int(np.ceil(37 / 2 ** (k - 1))), int(np.ceil(45 / 2 ** (k - 1))))


def test_extract_returns_only_requested(backbone):
    assert list(backbone.extract(torch.rand(1, 3, 32, 32), ["conv3_2"])) == ["conv3_2"]


def test_extract_deterministic(backbone):
    x = torch.rand(2, 3, 48, 48)
    a = backbone.extract(x, ["conv4_2"])["conv4_2"]
    b = backbone.extract(x.clone(), ["conv4_2"])["conv4_2"]
    assert torch.equal(a, b)


def test_undersized_input(backbone):
    with pytest.raises(DimensionError):
        backbone.extract(torch.rand(1, 3, 16, 64), ["conv2_2"])


def test_hypercolumn_channels(backbone):
    x = torch.rand(1, 3, 40, 56)
    assert torch.equal(backbone.hypercolumn(x, ()), x)
    layers = ("conv1_2", "conv2_2", "conv3_2")
    out = backbone.hypercolumn(x, layers)
    oracle = 3 + sum(backbone.channels(l) for l in layers)
    assert oracle == 451 == hypercolumn_channels(layers)
    assert out.shape == (1, 451, 40, 56)
    assert torch.equal(out[:, :3], x)


def test_no_gradient_into_parameters_but_into_input(backbone):
    x = torch.rand(1, 3, 32, 32, requires_grad=True)
    backbone.extract(x, ["conv5_2"])["conv5_2"].sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    assert all(p.grad is None and not p.requires_grad for p in backbone.parameters())


def test_input_gradient_matches_finite_differences(backbone64):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64, requires_grad=True)
    proj = torch.randn(1, 512, 2, 2, generator=g, dtype=torch.float64)

    def f(inp):
        return (backbone64.extract(inp, ["conv5_2"])["conv5_2"] * proj).sum()

    f(x).backward()
    idx = torch.randint(0, x.numel(), (64,), generator=g)  # 8x8 probe set
    eps = 1e-7  # piecewise-linear net: small steps avoid crossing ReLU/pool kinks
    fd, an = [], []
    flat = x.detach().flatten()
    for i in idx:
        plus, minus = flat.clone(), flat.clone()
        plus[i] += eps
        minus[i] -= eps
        fd.append((f(plus.view_as(x)) - f(minus.view_as(x))).item() / (2 * eps))
        an.append(x.grad.flatten()[i].item())
    fd, an = np.array(fd), np.array(an)
    assert np.linalg.norm(fd - an) <= 1e-3 * np.linalg.norm(an)
