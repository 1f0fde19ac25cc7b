import numpy as np
import pytest
import torch
from torch import nn

from contrep.evaluation import compute_embeddings
from contrep.exceptions import ProjectorDisabled, ShapeMismatch, UnknownHead
from contrep.models import (
    ContinualModel, EncoderConfig, ProjectorConfig, load_checkpoint, save_checkpoint, snapshot,
)
from contrep.models.encoder import build_mlp
from contrep.models.resnet import resnet18

from conftest import TINY_ENCODER

PROJ = ProjectorConfig(enabled=True, hidden_dim=32, output_dim=24)


def _model(**kwargs):
    kwargs.setdefault("projector", PROJ)
    return ContinualModel(TINY_ENCODER, **kwargs)


def _x(b=4, size=16, seed=0):
    return torch.randn(b, 3, size, size, generator=torch.Generator().manual_seed(seed))


def test_resnet18_feature_shape_full_width():
    model = ContinualModel(EncoderConfig())
    model.eval()
    assert model.forward_features(torch.randn(4, 3, 32, 32)).shape == (4, 512)


def test_resnet18_parameter_count():
    # the standard CIFAR ResNet-18 has 11.17M parameters without its classifier
    n = sum(p.numel() for p in resnet18().parameters())
    assert 11_100_000 < n < 11_250_000


def test_feature_dim_must_match_width():
    with pytest.raises(ValueError):
        EncoderConfig(width=64, feature_dim=256)
    assert EncoderConfig(width=16).feature_dim == 128


def test_wrong_input_shape():
    model = _model()
    with pytest.raises(ShapeMismatch):
        model.forward_features(torch.randn(2, 3, 32, 32))
    with pytest.raises(ShapeMismatch):
        model.forward_features(torch.randn(2, 1, 16, 16))


def test_eval_mode_is_deterministic():
    model = _model().eval()
    x = _x()
    assert torch.equal(model.forward_features(x), model.forward_features(x))


def test_snapshot_matches_live_model():
    model = _model().eval()
    x = _x()
    assert torch.equal(snapshot(model).forward_features(x), model.forward_features(x))


def test_projected_shape_and_normalization():
    model = _model().eval()
    assert model.forward_projected(_x()).shape == (4, 24)
    normed = _model(projector=ProjectorConfig(enabled=True, hidden_dim=32, output_dim=24,
                                              output_l2_normalize=True)).eval()
    norms = normed.forward_projected(_x()).norm(dim=1)
    assert torch.allclose(norms, torch.ones(4), atol=1e-5)


def test_identity_projector_equals_features():
    d = TINY_ENCODER.feature_dim
    model = _model(projector=ProjectorConfig(enabled=True, depth=1, output_dim=d)).eval()
    assert len(model.projector) == 1
    with torch.no_grad():
        model.projector[0].weight.copy_(torch.eye(d))
        model.projector[0].bias.zero_()
    x = _x()
    assert torch.allclose(model.forward_projected(x), model.forward_features(x), atol=1e-6)


def test_projector_disabled():
    model = ContinualModel(TINY_ENCODER)
    with pytest.raises(ProjectorDisabled):
        model.forward_projected(_x())
    with pytest.raises(ProjectorDisabled):
        ContinualModel(TINY_ENCODER, head_input="projector")


def test_build_mlp_layout():
    mlp = build_mlp(8, 3, 16, 4)
    kinds = [type(m) for m in mlp]
    assert kinds == [nn.Linear, nn.BatchNorm1d, nn.ReLU, nn.Linear, nn.BatchNorm1d, nn.ReLU, nn.Linear]


def test_logits_shapes():
    model = _model().eval()
    for t in range(5):
        model.add_head(t, range(20 * t, 20 * t + 20), seed=t)
    x = _x(8)
    assert model.forward_logits(x, 2).shape == (8, 20)
    all_heads = model.forward_logits(x)
    assert all_heads.shape == (8, 100)
    assert torch.allclose(all_heads[:, 40:60], model.forward_logits(x, 2))


def test_logits_from_projector():
    model = _model(head_input="projector").eval()
    model.add_head(0, range(3))
    assert model.head(0).in_features == 24
    assert model.forward_logits(_x(), 0).shape == (4, 3)


def test_zero_head_gives_uniform_softmax():
    model = _model().eval()
    head = model.add_head(0, range(5))
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    logits = model.forward_logits(_x(), 0)
    assert torch.equal(logits, torch.zeros(4, 5))
    assert torch.allclose(logits.softmax(1), torch.full((4, 5), 0.2))


def test_cosine_head_scale():
    model = _model(head_type="cosine", head_input="projector", cosine_temperature=0.1).eval()
    model.add_head(0, range(3))
    logits = model.forward_logits(_x(), 0)
    assert logits.abs().max() <= 10 + 1e-5


def test_unknown_head():
    model = _model()
    model.add_head(0, [0, 1])
    with pytest.raises(UnknownHead):
        model.forward_logits(_x(), 3)
    with pytest.raises(UnknownHead):
        ContinualModel(TINY_ENCODER).forward_logits(_x())


def test_local_labels():
    model = _model()
    model.add_head(1, [3, 8, 9])
    assert model.local_labels(1, torch.tensor([9, 3, 8])).tolist() == [2, 0, 1]
    with pytest.raises(ValueError):
        model.local_labels(1, torch.tensor([4]))


def test_snapshot_survives_training_step():
    model = _model()
    model.add_head(0, range(3))
    snap = snapshot(model)
    x = _x()
    before = snap.forward_features(x).clone()
    opt = torch.optim.SGD(model.parameters(), lr=0.5)
    loss = model.forward_logits(x, 0).sum() + model.forward_features(x).pow(2).sum()
    loss.backward()
    opt.step()
    model.eval()
    assert not torch.equal(model.forward_features(x), before)
    assert torch.equal(snap.forward_features(x), before)


def test_snapshot_calls_do_not_mutate():
    snap = snapshot(_model().train())
    x = _x()
    state = {k: v.clone() for k, v in snap.state_dict().items()}
    for _ in range(3):
        snap.forward_features(x)
    assert all(torch.equal(state[k], v) for k, v in snap.state_dict().items())
    assert not any(p.requires_grad for p in snap.model.parameters())


def test_snapshot_of_snapshot():
    snap = snapshot(_model())
    x = _x()
    assert torch.equal(snapshot(snap).forward_features(x), snap.forward_features(x))


def test_thaw_is_independent():
    snap = snapshot(_model())
    live = snap.thaw()
    assert all(p.requires_grad for p in live.parameters())
    with torch.no_grad():
        next(live.parameters()).add_(1.0)
    assert not torch.equal(next(live.parameters()), next(snap.model.parameters()))


def test_checkpoint_round_trip(tmp_path):
    model = _model(head_type="cosine", head_input="projector")
    model.add_head(0, [1, 4])
    model.add_head(1, [0, 2, 3])
    x = _x()
    path = save_checkpoint(tmp_path / "task1.ckpt", snapshot(model), {"boundary": 1})
    loaded, meta = load_checkpoint(path)
    model.eval()
    assert meta == {"boundary": 1}
    assert loaded.head_classes == {0: (1, 4), 1: (0, 2, 3)}
    assert torch.allclose(loaded.forward_features(x), model.forward_features(x), atol=1e-6)
    assert torch.allclose(loaded.forward_logits(x), model.forward_logits(x), atol=1e-6)
    assert not (tmp_path / "task1.ckpt.tmp").exists()


def test_evaluation_ignores_projector_and_heads():
    model = _model()
    model.add_head(0, range(3))
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (10, 16, 16, 3), dtype=np.uint8)
    labels = np.arange(10) % 3
    mean, std = (0.5,) * 3, (0.25,) * 3
    before = compute_embeddings(model, images, labels, mean, std)
    with torch.no_grad():
        for p in list(model.projector.parameters()) + list(model.heads.parameters()):
            p.fill_(float("nan"))
    after = compute_embeddings(model, images, labels, mean, std)
    assert np.array_equal(before.features, after.features)
    assert np.isfinite(after.features).all()
