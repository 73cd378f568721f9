import math
from dataclasses import replace

import numpy as np
import pytest

from cpga.datasets import (
    Dataset,
    ShiftConfig,
    _class_means,
    apply_shift,
    inject_label_noise,
    load_dataset,
    make_gaussian_domains,
    make_moons_domains,
    rotation_matrix,
    save_dataset,
)
from cpga.errors import ConfigurationError


class TestShiftConfig:
    @pytest.mark.parametrize("field,value", [
        ("num_classes", 1),
        ("input_dim", 1),
        ("samples_per_class", 0),
        ("noise_std", -0.1),
        ("scale", 0.0),
        ("scale", -2.0),
        ("class_separation", 0.0),
    ])
    def test_rejects_bad_field(self, field, value):
        cfg = replace(ShiftConfig(), **{field: value})
        with pytest.raises(ConfigurationError):
            cfg.validate()

    def test_translation_scalar_broadcasts(self):
        cfg = ShiftConfig(input_dim=4, translation=1.5)
        cfg.validate()
        assert np.array_equal(cfg.translation_vector(), np.full(4, 1.5))

    def test_translation_empty_is_zero(self):
        cfg = ShiftConfig(input_dim=3)
        assert np.array_equal(cfg.translation_vector(), np.zeros(3))

    def test_translation_wrong_length_rejected(self):
        cfg = ShiftConfig(input_dim=4, translation=(1.0, 2.0))
        with pytest.raises(ConfigurationError, match="translation"):
            cfg.validate()

    def test_is_identity(self):
        assert ShiftConfig().is_identity()
        assert not ShiftConfig(rotation_angle=0.1).is_identity()
        assert not ShiftConfig(scale=1.1).is_identity()
        assert not ShiftConfig(translation=0.5).is_identity()


class TestClassMeans:
    def test_all_means_at_separation_radius(self):
        for k, d in [(8, 16), (4, 8), (8, 4), (3, 2)]:
            means = _class_means(ShiftConfig(num_classes=k, input_dim=d,
                                             class_separation=2.5))
            assert means.shape == (k, d)
            assert np.linalg.norm(means, axis=1) == pytest.approx(
                np.full(k, 2.5))

    def test_wide_layout_uses_four_per_plane(self):
        means = _class_means(ShiftConfig(num_classes=8, input_dim=16,
                                         class_separation=1.0))
        # classes 0-3 live in coordinates (0,1), classes 4-7 in (2,3)
        assert not means[:4, 2:].any()
        assert not np.concatenate([means[4:, :2], means[4:, 4:]], 1).any()

    def test_min_pairwise_distance_is_adjacent_gap(self):
        sep = 2.0
        means = _class_means(ShiftConfig(num_classes=8, input_dim=16,
                                         class_separation=sep))
        diffs = np.linalg.norm(means[:, None] - means[None], axis=2)
        off_diag = diffs[~np.eye(8, dtype=bool)]
        assert off_diag.min() == pytest.approx(math.sqrt(2) * sep)

    def test_rotation_below_quarter_pi_keeps_identity_nearest(self):
        cfg = ShiftConfig(num_classes=8, input_dim=16, rotation_angle=0.5,
                          class_separation=2.2)
        means = _class_means(cfg)
        shifted = apply_shift(means, cfg)
        dists = np.linalg.norm(shifted[:, None] - means[None], axis=2)
        assert np.array_equal(dists.argmin(axis=1), np.arange(8))

    def test_tight_layout_single_circle(self):
        means = _class_means(ShiftConfig(num_classes=6, input_dim=2,
                                         class_separation=1.0))
        assert means.shape == (6, 2)
        angles = np.arctan2(means[:, 1], means[:, 0])
        spacing = np.diff(np.unwrap(angles))
        assert spacing == pytest.approx(np.full(5, 2 * np.pi / 6))


class TestRotationMatrix:
    def test_orthogonal_unit_determinant(self):
        rot = rotation_matrix(6, 0.7)
        assert np.allclose(rot @ rot.T, np.eye(6), atol=1e-12)
        assert np.linalg.det(rot) == pytest.approx(1.0)

    def test_zero_angle_is_identity(self):
        assert np.array_equal(rotation_matrix(5, 0.0), np.eye(5))

    def test_odd_dimension_leaves_last_axis_fixed(self):
        rot = rotation_matrix(5, 1.2)
        assert rot[4, 4] == 1.0
        assert not rot[4, :4].any() and not rot[:4, 4].any()

    def test_plane_blocks_rotate_by_angle(self):
        rot = rotation_matrix(4, 0.3)
        point = np.array([1.0, 0.0, 0.0, 0.0])
        moved = rot @ point
        assert math.acos(point @ moved) == pytest.approx(0.3)


class TestApplyShift:
    def test_identity_returns_points(self):
        pts = np.arange(12.0).reshape(3, 4)
        out = apply_shift(pts, ShiftConfig(input_dim=4))
        assert np.array_equal(out, pts)

    def test_rotation_preserves_norms(self):
        pts = np.random.default_rng(0).standard_normal((5, 6))
        out = apply_shift(pts, ShiftConfig(input_dim=6, rotation_angle=0.9))
        assert np.allclose(np.linalg.norm(out, axis=1),
                           np.linalg.norm(pts, axis=1))

    def test_scale_and_translation_compose(self):
        pts = np.ones((2, 3))
        cfg = ShiftConfig(input_dim=3, scale=2.0, translation=(1.0, 0.0, -1.0))
        assert np.array_equal(apply_shift(pts, cfg),
                              2.0 * pts + np.array([1.0, 0.0, -1.0]))


class TestGaussianDomains:
    def test_shapes_and_balance(self):
        cfg = ShiftConfig(num_classes=3, input_dim=4, samples_per_class=10)
        source, target = make_gaussian_domains(cfg)
        for ds in (source, target):
            assert ds.features.shape == (30, 4)
            assert ds.n == 30 and ds.input_dim == 4
            assert np.array_equal(np.bincount(ds.eval_labels()),
                                  np.full(3, 10))
        assert source.domain == "source" and target.domain == "target"

    def test_deterministic_per_config(self):
        cfg = ShiftConfig(num_classes=2, input_dim=3, samples_per_class=5,
                          rotation_angle=0.4, seed=7)
        a_src, a_tgt = make_gaussian_domains(cfg)
        b_src, b_tgt = make_gaussian_domains(cfg)
        assert np.array_equal(a_src.features, b_src.features)
        assert np.array_equal(a_tgt.features, b_tgt.features)

    def test_seed_changes_draws(self):
        base = ShiftConfig(num_classes=2, input_dim=3, samples_per_class=5)
        a, _ = make_gaussian_domains(base)
        b, _ = make_gaussian_domains(replace(base, seed=1))
        assert not np.array_equal(a.features, b.features)

    def test_domains_use_independent_noise(self):
        source, target = make_gaussian_domains(
            ShiftConfig(num_classes=2, input_dim=3, samples_per_class=5))
        # identity transform, so any difference comes from the noise draw
        assert not np.array_equal(source.features, target.features)

    def test_target_labels_forbidden(self):
        _, target = make_gaussian_domains(
            ShiftConfig(num_classes=2, input_dim=3, samples_per_class=4))
        with pytest.raises(RuntimeError, match="eval_labels"):
            target.labels
        assert target.eval_labels().shape == (8,)

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigurationError):
            make_gaussian_domains(ShiftConfig(num_classes=1))


class TestMoonsDomains:
    def test_requires_two_classes(self):
        with pytest.raises(ConfigurationError, match="2 for moons"):
            make_moons_domains(ShiftConfig(num_classes=3, input_dim=2,
                                           samples_per_class=5))

    def test_shapes_and_padding(self):
        cfg = ShiftConfig(num_classes=2, input_dim=5, samples_per_class=6,
                          noise_std=0.05)
        source, target = make_moons_domains(cfg)
        assert source.features.shape == (12, 5)
        assert target.features.shape == (12, 5)
        assert sorted(np.bincount(source.labels)) == [6, 6]

    def test_deterministic_per_config(self):
        cfg = ShiftConfig(num_classes=2, input_dim=2, samples_per_class=8,
                          rotation_angle=0.2, seed=3)
        a_src, a_tgt = make_moons_domains(cfg)
        b_src, b_tgt = make_moons_domains(cfg)
        assert np.array_equal(a_src.features, b_src.features)
        assert np.array_equal(a_tgt.features, b_tgt.features)


class TestDataset:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ConfigurationError, match="2-d"):
            Dataset(np.zeros(3), np.zeros(3, dtype=int), "source", 2)
        with pytest.raises(ConfigurationError, match="align"):
            Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int), "source", 2)
        with pytest.raises(ConfigurationError, match="domain"):
            Dataset(np.zeros((3, 2)), np.zeros(3, dtype=int), "test", 2)

    def test_rejects_out_of_range_labels(self):
        with pytest.raises(ConfigurationError, match="range"):
            Dataset(np.zeros((2, 2)), np.array([0, 2]), "source", 2)
        with pytest.raises(ConfigurationError, match="range"):
            Dataset(np.zeros((2, 2)), np.array([-1, 0]), "source", 2)


class TestInjectLabelNoise:
    def test_exact_flip_count_and_all_changed(self):
        labels = np.repeat(np.arange(4), 25)
        noisy = inject_label_noise(labels, 0.3, seed=0)
        changed = (noisy != labels).sum()
        assert changed == 30
        assert noisy.min() >= 0 and noisy.max() <= 3
        # untouched input
        assert np.array_equal(labels, np.repeat(np.arange(4), 25))

    def test_rate_zero_is_copy(self):
        labels = np.array([0, 1, 2])
        noisy = inject_label_noise(labels, 0.0, seed=0)
        assert np.array_equal(noisy, labels)
        assert noisy is not labels

    def test_count_rounds_to_nearest(self):
        labels = np.repeat(np.arange(2), 5)   # n=10, rate 0.25 -> 2.5 -> 2
        noisy = inject_label_noise(labels, 0.25, seed=1)
        assert (noisy != labels).sum() == 2

    def test_deterministic_per_seed(self):
        labels = np.repeat(np.arange(4), 10)
        a = inject_label_noise(labels, 0.5, seed=5)
        b = inject_label_noise(labels, 0.5, seed=5)
        c = inject_label_noise(labels, 0.5, seed=6)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_rejects_bad_rate(self):
        labels = np.array([0, 1])
        for rate in (-0.1, 1.1):
            with pytest.raises(ConfigurationError):
                inject_label_noise(labels, rate, seed=0)

    def test_single_class_cannot_flip(self):
        with pytest.raises(ConfigurationError, match="2 classes"):
            inject_label_noise(np.zeros(10, dtype=int), 0.5, seed=0)


class TestSaveLoad:
    def test_roundtrip_exact(self, tmp_path):
        source, target = make_gaussian_domains(
            ShiftConfig(num_classes=3, input_dim=4, samples_per_class=7,
                        rotation_angle=0.3, seed=2))
        for ds in (source, target):
            path = tmp_path / f"{ds.domain}.txt"
            save_dataset(ds, path)
            back = load_dataset(path)
            assert np.array_equal(back.features, ds.features)
            assert np.array_equal(back.eval_labels(), ds.eval_labels())
            assert back.domain == ds.domain
            assert back.num_classes == ds.num_classes

    def test_header_format(self, tmp_path):
        source, _ = make_gaussian_domains(
            ShiftConfig(num_classes=2, input_dim=3, samples_per_class=2))
        path = tmp_path / "d.txt"
        save_dataset(source, path)
        header = path.read_text().splitlines()[0]
        assert header == "cpga-dataset v1 K=2 d=3 domain=source"

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("cpga-dataset v2 K=2 d=3 domain=source\n0,1,2,3\n")
        with pytest.raises(ValueError, match="line 1"):
            load_dataset(path)

    def test_wrong_field_count_names_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text(
            "cpga-dataset v1 K=2 d=2 domain=source\n0,1.0,2.0\n1,3.0\n")
        with pytest.raises(ValueError, match="line 3"):
            load_dataset(path)

    def test_bad_float_names_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text(
            "cpga-dataset v1 K=2 d=2 domain=target\n0,1.0,oops\n")
        with pytest.raises(ValueError, match="line 2"):
            load_dataset(path)


def energy_distance(a, b):
    from scipy.spatial.distance import cdist
    return (2.0 * cdist(a, b).mean() - cdist(a, a).mean()
            - cdist(b, b).mean())


def test_zero_shift_domains_are_statistically_indistinguishable():
    """Permutation test: the cross-domain energy distance of an identity
    shift sits inside the null distribution of pooled reshuffles."""
    cfg = ShiftConfig(num_classes=4, input_dim=8, samples_per_class=30,
                      rotation_angle=0.0, noise_std=0.5,
                      class_separation=3.0, seed=0)
    source, target = make_gaussian_domains(cfg)
    observed = energy_distance(source.features, target.features)
    pooled = np.vstack([source.features, target.features])
    rng = np.random.default_rng(55)
    n = source.n
    null = []
    for _ in range(50):
        perm = rng.permutation(len(pooled))
        null.append(energy_distance(pooled[perm[:n]], pooled[perm[n:]]))
    p_value = float(np.mean([v >= observed for v in null]))
    assert p_value > 0.05
