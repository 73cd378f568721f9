import numpy as np
import pytest
import torch

from cpga.errors import ContractViolation
from cpga.models import (
    ContrastiveProjector,
    FeatureExtractor,
    PrototypeGenerator,
    WeightNormClassifier,
    assert_frozen,
    content_hash,
    freeze,
    is_frozen,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from cpga.numerics import torch_generator
from conftest import scramble_global_rng


def gen(seed=0):
    return torch_generator(seed, 0)


class TestFeatureExtractor:
    def test_output_shape_and_dtype(self):
        net = FeatureExtractor(6, feature_dim=5, hidden_dims=(8,),
                               generator=gen())
        out = net(torch.zeros(3, 6, dtype=torch.float64))
        assert out.shape == (3, 5)
        assert out.dtype == torch.float64

    def test_accepts_numpy_input(self):
        net = FeatureExtractor(4, feature_dim=3, hidden_dims=(8,),
                               generator=gen())
        out = net(np.zeros((2, 4)))
        assert out.shape == (2, 3)

    def test_seeded_init_is_reproducible(self):
        scramble_global_rng(11)
        a = FeatureExtractor(4, 3, (8,), generator=gen(5))
        scramble_global_rng(22)
        b = FeatureExtractor(4, 3, (8,), generator=gen(5))
        c = FeatureExtractor(4, 3, (8,), generator=gen(6))
        assert content_hash(a) == content_hash(b)
        assert content_hash(a) != content_hash(c)

    def test_last_layer_linear(self):
        # zeroing the output layer must zero the features exactly; a
        # squashing output activation would leave tanh(0)=0 anyway, so
        # check an affine property instead: doubling out-weights doubles
        # the output.
        net = FeatureExtractor(3, 4, (6,), generator=gen())
        x = torch.ones(2, 3, dtype=torch.float64)
        before = net(x)
        with torch.no_grad():
            net.out.weight *= 2.0
            net.out.bias *= 2.0
        assert torch.allclose(net(x), 2.0 * before)


class TestWeightNormClassifier:
    def test_weight_rows_have_gain_norms(self):
        clf = WeightNormClassifier(5, 7, generator=gen())
        with torch.no_grad():
            clf.gains.copy_(torch.tensor([1.0, 2.0, 0.5, 3.0, 1.5],
                                         dtype=torch.float64))
        norms = clf.weight().norm(dim=1)
        assert torch.allclose(norms, clf.gains.detach().abs(), atol=1e-12)

    def test_logits_scale_with_feature_norm(self):
        clf = WeightNormClassifier(3, 4, generator=gen())
        f = torch.randn(2, 4, dtype=torch.float64,
                        generator=torch_generator(1, 0))
        assert torch.allclose(clf.logits(3.0 * f), 3.0 * clf.logits(f))

    def test_forward_is_softmax_of_logits(self):
        clf = WeightNormClassifier(4, 6, generator=gen())
        f = torch.randn(3, 6, dtype=torch.float64,
                        generator=torch_generator(2, 0))
        assert torch.allclose(clf(f), torch.softmax(clf.logits(f), dim=-1))

    def test_direction_rescale_leaves_weight_unchanged(self):
        clf = WeightNormClassifier(3, 4, generator=gen())
        before = clf.weight().detach().clone()
        with torch.no_grad():
            clf.directions *= 7.0
        assert torch.allclose(clf.weight(), before, atol=1e-12)


class TestPrototypeGenerator:
    def test_prototypes_live_in_nonnegative_cone(self):
        g = PrototypeGenerator(4, 6, noise_dim=5, hidden_dim=16,
                               generator=gen())
        labels = torch.arange(4).repeat(8)
        protos = g(labels, g.sample_noise(len(labels), gen(1)))
        assert protos.shape == (32, 6)
        assert (protos >= 0).all()

    def test_noise_bounds(self):
        g = PrototypeGenerator(2, 3, noise_dim=50, generator=gen())
        z = g.sample_noise(100, gen(2))
        assert z.shape == (100, 50)
        assert z.min() >= 0.0 and z.max() < 1.0

    def test_rejects_bad_labels_and_noise_shape(self):
        g = PrototypeGenerator(3, 4, noise_dim=5, generator=gen())
        noise = g.sample_noise(2, gen(0))
        with pytest.raises(ValueError, match="label"):
            g(torch.tensor([0, 3]), noise)
        with pytest.raises(ValueError, match="noise"):
            g(torch.tensor([0, 1]), noise[:, :4])

    def test_same_label_different_noise_varies(self):
        g = PrototypeGenerator(2, 8, noise_dim=6, generator=gen())
        labels = torch.zeros(2, dtype=torch.long)
        protos = g(labels, g.sample_noise(2, gen(3)))
        assert not torch.allclose(protos[0], protos[1])


class TestContrastiveProjector:
    def test_output_on_unit_sphere(self):
        proj = ContrastiveProjector(6, (8, 4), contrast_dim=5,
                                    generator=gen())
        out = proj(torch.randn(9, 6, dtype=torch.float64,
                               generator=torch_generator(4, 0)))
        assert out.shape == (9, 5)
        assert torch.allclose(out.norm(dim=1),
                              torch.ones(9, dtype=torch.float64), atol=1e-9)


class TestFreezing:
    def test_freeze_and_assert(self):
        net = FeatureExtractor(3, 4, (6,), generator=gen())
        assert not is_frozen(net)
        with pytest.raises(ContractViolation, match="stay frozen"):
            assert_frozen(net, "extractor")
        freeze(net)
        assert is_frozen(net)
        assert_frozen(net, "extractor")

    def test_frozen_forward_still_differentiable_wrt_input(self):
        clf = freeze(WeightNormClassifier(3, 4, generator=gen()))
        f = torch.randn(2, 4, dtype=torch.float64,
                        generator=torch_generator(5, 0), requires_grad=True)
        clf(f).sum().backward()
        assert f.grad is not None


class TestCheckpoints:
    def test_module_roundtrip_exact(self, tmp_path):
        net = FeatureExtractor(4, 3, (8,), generator=gen(7))
        path = tmp_path / "extractor.npz"
        save_checkpoint(path, "extractor", net, seed=7)
        twin = FeatureExtractor(4, 3, (8,), generator=gen(8))
        manifest = load_checkpoint(path, twin)
        assert manifest["component"] == "extractor"
        assert manifest["seed"] == 7
        for a, b in zip(net.parameters(), twin.parameters()):
            assert torch.equal(a, b)

    def test_mapping_roundtrip(self, tmp_path):
        arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.zeros(2)}
        path = tmp_path / "map.npz"
        save_checkpoint(path, "banks", arrays)
        manifest, back = read_checkpoint(path)
        assert [p["name"] for p in manifest["params"]] == ["w", "b"]
        assert np.array_equal(back["w"], arrays["w"])
        assert np.array_equal(back["b"], arrays["b"])

    def test_load_rejects_mismatched_module(self, tmp_path):
        net = FeatureExtractor(4, 3, (8,), generator=gen())
        path = tmp_path / "e.npz"
        save_checkpoint(path, "extractor", net)
        with pytest.raises(ValueError, match="parameter names"):
            load_checkpoint(path, WeightNormClassifier(3, 4, generator=gen()))

    def test_load_rejects_shape_mismatch(self, tmp_path):
        net = FeatureExtractor(4, 3, (8,), generator=gen())
        path = tmp_path / "e.npz"
        save_checkpoint(path, "extractor", net)
        other = FeatureExtractor(4, 3, (9,), generator=gen())
        with pytest.raises(ValueError, match="shape mismatch"):
            load_checkpoint(path, other)

    def test_read_rejects_foreign_npz(self, tmp_path):
        path = tmp_path / "foreign.npz"
        np.savez(path, manifest=np.frombuffer(b'{"format":"x"}',
                                              dtype=np.uint8))
        with pytest.raises(ValueError, match="not a checkpoint"):
            read_checkpoint(path)


class TestContentHash:
    def test_agrees_across_module_mapping_and_path(self, tmp_path):
        net = WeightNormClassifier(3, 5, generator=gen(9))
        path = tmp_path / "clf.npz"
        save_checkpoint(path, "classifier", net)
        as_map = {n: p.detach().numpy() for n, p in net.named_parameters()}
        assert content_hash(net) == content_hash(as_map) == content_hash(path)

    def test_sensitive_to_any_parameter_bit(self):
        net = WeightNormClassifier(3, 5, generator=gen(9))
        before = content_hash(net)
        with torch.no_grad():
            v = net.directions[0, 0]
            net.directions[0, 0] = torch.nextafter(
                v, torch.tensor(float("inf"), dtype=torch.float64))
        assert content_hash(net) != before
