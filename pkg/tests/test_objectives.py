import numpy as np
import pytest

from metaface import autodiff as ad
from metaface.model import MotionClip
from metaface.objectives import (
    LossWeights,
    MetricReport,
    aggregate,
    dtw_lip_sync,
    evaluate_clip,
    l2_metrics,
    recon_loss,
    total_loss,
    velocity_loss,
)
from oracles import brute_dtw, naive_recon, naive_velocity


def test_recon_constant_offset():
    gt = np.zeros((4, 3, 3))
    assert recon_loss(gt + 2.0, gt).item() == 4.0
    assert velocity_loss(gt + 2.0, gt).item() == 0.0


def test_velocity_ignores_per_clip_offset(rng):
    gt = rng.standard_normal((6, 4, 3))
    assert velocity_loss(gt + 0.75, gt).item() == pytest.approx(0.0, abs=1e-28)


def test_losses_match_loops(rng):
    for _ in range(10):
        T = int(rng.integers(2, 9))
        p, g = rng.standard_normal((T, 5, 3)), rng.standard_normal((T, 5, 3))
        assert abs(recon_loss(p, g).item() - naive_recon(p, g)) < 1e-12
        assert abs(velocity_loss(MotionClip(p), MotionClip(g)).item() - naive_velocity(p, g)) < 1e-12


def test_velocity_needs_two_frames():
    with pytest.raises(ValueError):
        velocity_loss(np.zeros((1, 2, 3)), np.zeros((1, 2, 3)))


def test_loss_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        recon_loss(np.zeros((3, 2, 3)), np.zeros((4, 2, 3)))


def test_total_loss_weights():
    r, v, k = ad.constant(0.5), ad.constant(0.25), ad.constant(2.0)
    assert total_loss(r, v, k, LossWeights(1000, 1000, 10)).item() == 770.0


def test_l2_metrics_loops(rng):
    p, g = rng.standard_normal((5, 6, 3)), rng.standard_normal((5, 6, 3))
    face, lip, lmax = l2_metrics(p, g, (1, 4))
    d = [[np.sqrt(sum((p[t, v, c] - g[t, v, c]) ** 2 for c in range(3))) for v in range(6)] for t in range(5)]
    assert face == pytest.approx(np.mean(d), rel=1e-13)
    assert lip == pytest.approx(np.mean([row[1:4] for row in d]), rel=1e-13)
    assert lmax == pytest.approx(np.mean([max(row[1:4]) for row in d]), rel=1e-13)


def test_identical_clips_score_zero(rng):
    g = rng.standard_normal((7, 6, 3))
    r = evaluate_clip(g, g, (0, 3))
    assert (r.l2_face, r.l2_lip, r.lip_max, r.lip_sync) == (0.0, 0.0, 0.0, 0.0)


def test_dtw_time_shift_is_cheaper_than_l2(rng):
    g = rng.standard_normal((8, 4, 3))
    shifted = np.concatenate([g[:1], g[:-1]])
    assert dtw_lip_sync(shifted, g, (0, 4)) < l2_metrics(shifted, g, (0, 4))[1]


def test_dtw_unequal_lengths_brute(rng):
    p, g = rng.standard_normal((3, 2, 3)), rng.standard_normal((5, 2, 3))
    assert abs(dtw_lip_sync(p, g, (0, 2)) - brute_dtw(p, g)[0]) < 1e-12


def test_report_text_round_trip(rng):
    r = MetricReport(*rng.random(4), 3)
    text = r.to_text()
    assert "l2_face=" in text and text.count("\n") == 5
    assert MetricReport.from_text(text) == r


def test_aggregate_weights_by_clip_count():
    a = MetricReport(1.0, 1.0, 1.0, 1.0, 1)
    b = MetricReport(4.0, 4.0, 4.0, 4.0, 3)
    assert aggregate([a, b]).l2_face == 3.25
    with pytest.raises(ValueError):
        aggregate([])
