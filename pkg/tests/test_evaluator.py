import numpy as np
import pytest

from flawmap.errors import ParameterError, ValidationError
from flawmap.evaluator import (
    AnomalyMap,
    anomaly_map,
    heat_colormap,
    render_heatmap_overlay,
    roc,
    roc_per_image,
    select_threshold,
)
from flawmap.model import NetworkConfig, build


def _pair_count_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a positive outscores a negative, ties counting half."""
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for p in pos:
        wins += (p > neg).sum() + 0.5 * (p == neg).sum()
    return wins / (len(pos) * len(neg))


class TestRoc:
    def test_perfect_separation_is_one(self):
        residual = np.zeros((10, 10))
        mask = np.zeros((10, 10), dtype=bool)
        mask[2:5, 2:5] = True
        residual[mask] = 0.9
        curve = roc([residual], [mask])
        assert curve.auc == pytest.approx(1.0, abs=1e-12)

    def test_inverted_scores_is_zero(self):
        residual = np.full((10, 10), 0.9)
        mask = np.zeros((10, 10), dtype=bool)
        mask[2:5, 2:5] = True
        residual[mask] = 0.1
        curve = roc([residual], [mask])
        assert curve.auc == pytest.approx(0.0, abs=1e-12)

    def test_constant_scores_give_half(self):
        residual = np.full((10, 10), 0.5)
        mask = np.zeros((10, 10), dtype=bool)
        mask[:5] = True
        curve = roc([residual], [mask])
        assert curve.auc == pytest.approx(0.5, abs=1e-12)

    def test_matches_pair_count_on_small_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(10, 100))
            scores = rng.choice(np.linspace(0, 1, 17), size=n)
            labels = rng.random(n) < 0.4
            if labels.all() or not labels.any():
                continue
            curve = roc([scores.reshape(1, -1)], [labels.reshape(1, -1)])
            expected = _pair_count_auc(scores, labels)
            assert curve.auc == pytest.approx(expected, abs=1e-9)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.random((8, 8))
        mask = rng.random((8, 8)) < 0.3
        if not mask.any() or mask.all():
            mask[0, 0] = True
            mask[1, 1] = False
        a = roc([scores], [mask]).auc
        b = roc([np.sqrt(scores)], [mask]).auc
        assert a == pytest.approx(b, abs=1e-9)

    def test_curve_runs_origin_to_corner(self):
        rng = np.random.default_rng(2)
        residual = rng.random((12, 12))
        mask = rng.random((12, 12)) < 0.2
        mask[0, 0] = True
        curve = roc([residual], [mask])
        assert curve.thresholds[0] == np.inf
        assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
        assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0
        assert (np.diff(curve.fpr) >= 0).all()
        assert (np.diff(curve.tpr) >= 0).all()

    def test_pools_across_maps(self):
        # one map holds all positives, the other all negatives; pooling
        # must still rank them jointly
        hot = np.full((4, 4), 0.8)
        cold = np.full((4, 4), 0.2)
        curve = roc([hot, cold], [np.ones((4, 4), bool), np.zeros((4, 4), bool)])
        assert curve.auc == pytest.approx(1.0, abs=1e-12)

    def test_single_class_rejected(self):
        residual = np.random.default_rng(3).random((6, 6))
        with pytest.raises(ValidationError, match="both classes"):
            roc([residual], [np.zeros((6, 6), bool)])
        with pytest.raises(ValidationError, match="both classes"):
            roc([residual], [np.ones((6, 6), bool)])

    def test_empty_and_mismatched_inputs_rejected(self):
        with pytest.raises(ParameterError):
            roc([], [])
        with pytest.raises(ParameterError):
            roc([np.zeros((4, 4))], [])
        with pytest.raises(ValidationError, match="shapes"):
            roc([np.zeros((4, 4))], [np.zeros((4, 5), bool)])

    def test_explicit_thresholds_respected(self):
        residual = np.array([[0.1, 0.9]])
        mask = np.array([[False, True]])
        curve = roc([residual], [mask], thresholds=np.array([0.0, 0.5, 1.0]))
        assert list(curve.thresholds) == [1.0, 0.5, 0.0]

    def test_per_image_skips_single_class_maps(self):
        rng = np.random.default_rng(4)
        maps = [rng.random((6, 6)) for _ in range(3)]
        masks = [
            np.zeros((6, 6), bool),  # skipped
            rng.random((6, 6)) < 0.3,
            np.ones((6, 6), bool),  # skipped
        ]
        if not masks[1].any() or masks[1].all():
            masks[1][0, 0] = True
            masks[1][1, 1] = False
        curves = roc_per_image(maps, masks)
        assert len(curves) == 1


class TestSelectThreshold:
    def _curve(self):
        rng = np.random.default_rng(5)
        residual = rng.random((16, 16))
        mask = rng.random((16, 16)) < 0.3
        return roc([residual], [mask])

    def test_threshold_meets_target(self):
        curve = self._curve()
        t = select_threshold(curve, target_tpr=0.4)
        idx = np.isfinite(curve.thresholds) & (curve.thresholds == t)
        assert curve.tpr[idx][0] >= 0.4
        # the next larger finite threshold falls short of the target
        larger = np.isfinite(curve.thresholds) & (curve.thresholds > t)
        if larger.any():
            assert curve.tpr[larger].max() < 0.4

    def test_target_one_returns_lowest_useful_threshold(self):
        curve = self._curve()
        t = select_threshold(curve, target_tpr=1.0)
        idx = curve.thresholds == t
        assert curve.tpr[idx][0] == 1.0

    def test_bad_target_rejected(self):
        curve = self._curve()
        with pytest.raises(ParameterError, match="target_tpr"):
            select_threshold(curve, 0.0)
        with pytest.raises(ParameterError, match="target_tpr"):
            select_threshold(curve, 1.5)

    def test_unreachable_target_reports_maximum(self):
        # restrict thresholds so the curve never reaches the target
        residual = np.array([[0.1, 0.2, 0.9, 0.95]])
        mask = np.array([[False, False, True, True]])
        curve = roc([residual], [mask], thresholds=np.array([0.99]))
        with pytest.raises(ParameterError, match="unreachable"):
            select_threshold(curve, 0.5)


class TestAnomalyMap:
    def test_residual_is_absolute_difference(self):
        cfg = NetworkConfig(input_size=(17, 17), channels=(2, 3, 4), skip_stages=(1,))
        model = build(cfg, init_seed=0)
        rng = np.random.default_rng(6)
        tile = rng.random((17, 17))
        am = anomaly_map(model, tile, threshold=0.1)
        from flawmap.model import forward

        recon = forward(model, tile)
        assert np.array_equal(am.residual, np.abs(tile - recon))
        assert np.array_equal(am.binary, am.residual >= 0.1)

    def test_rethreshold_keeps_residual(self):
        residual = np.linspace(0, 1, 16).reshape(4, 4)
        am = AnomalyMap(residual, 0.5, residual >= 0.5)
        am2 = am.rethreshold(0.25)
        assert am2.residual is residual
        assert am2.binary.sum() > am.binary.sum()


class TestRendering:
    def test_colormap_anchors(self):
        v = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
        rgb = heat_colormap(v)
        assert np.allclose(rgb[0], [0, 0, 0], atol=1e-12)
        assert np.allclose(rgb[1], [1, 0, 0], atol=1e-9)
        assert np.allclose(rgb[2], [1, 1, 0], atol=1e-9)
        assert np.allclose(rgb[3], [1, 1, 1], atol=1e-12)

    def test_panel_layout(self):
        rng = np.random.default_rng(7)
        tile = rng.random((20, 24))
        residual = rng.random((20, 24))
        panel = render_heatmap_overlay(tile, residual)
        assert panel.shape == (20, 72, 3)
        # left panel is the tile replicated to RGB
        assert np.array_equal(panel[:, :24, 0], tile)
        assert np.array_equal(panel[:, :24, 1], tile)
        # middle panel is the colored residual, max-normalized
        expected_heat = heat_colormap(residual / residual.max())
        assert np.allclose(panel[:, 24:48], expected_heat, atol=1e-12)

    def test_hottest_pixel_saturates(self):
        tile = np.zeros((8, 8))
        residual = np.zeros((8, 8))
        residual[3, 4] = 0.007  # tiny but maximal: normalization must find it
        panel = render_heatmap_overlay(tile, residual)
        assert np.allclose(panel[3, 8 + 4], [1, 1, 1], atol=1e-12)

    def test_zero_residual_renders_black_heat(self):
        tile = np.full((8, 8), 0.5)
        panel = render_heatmap_overlay(tile, np.zeros((8, 8)))
        assert np.allclose(panel[:, 8:16], 0.0, atol=1e-12)

    def test_blend_uses_opacities(self):
        tile = np.full((4, 4), 1.0)
        residual = np.zeros((4, 4))
        panel = render_heatmap_overlay(tile, residual, opacities=(0.75, 0.5))
        # heat is black, so the overlay shows the dimmed tile only:
        # (1 - 0.75) * (0.5 * 1.0)
        assert np.allclose(panel[:, 8:12], 0.125, atol=1e-12)

    def test_validations(self):
        with pytest.raises(ValidationError, match="shapes"):
            render_heatmap_overlay(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(ParameterError, match="opacities"):
            render_heatmap_overlay(np.zeros((4, 4)), np.zeros((4, 4)), opacities=(1.5, 0.5))
