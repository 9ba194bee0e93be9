import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import TOL, check
from tavp.config import RunConfig
from tavp.errors import NoSignalError
from tavp.netcore.tensor import Tensor
from tavp.render import Heatmap, gt_heatmap
from tavp.tasks.model import (
    ActionPrediction,
    ColorCodes,
    DenseHeatmap,
    PixelBatch,
    PredictedHeatmap,
    TavpModel,
    canonical_poses,
    heatmap_loss,
    reference_losses,
    stage1_losses,
)
from tavp.tasks.scenes import generate_scene


def _batch(rng, h=6, w=5, n_colors=4, bg=True):
    colors = rng.integers(0, 256, (n_colors, 3)) / 255.0
    codes = ColorCodes.from_colors(colors)
    index = rng.integers(-1 if bg else 0, n_colors, (h, w))
    return PixelBatch.from_render(codes, index), index, colors


def _dense_ce(pred: PredictedHeatmap, gt: np.ndarray) -> float:
    p = pred.probs()
    m = gt > 0
    return float(-(gt[m] * np.log(p[m])).sum())


@given(st.integers(0, 2**32 - 1))
def test_compressed_ce_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    pb, index, _ = _batch(rng)
    logits = rng.standard_normal(pb.counts.size) * 3
    pred = PredictedHeatmap(Tensor(logits), pb)
    gt = rng.random(index.shape) * (rng.random(index.shape) < 0.6)
    gt[0, 0] += 0.1
    gt /= gt.sum()
    assert pred.cross_entropy(Heatmap(gt, True)).item() == pytest.approx(_dense_ce(pred, gt), abs=1e-10)
    p = pred.probs()
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert pred.entropy() == pytest.approx(float(-(p * np.log(p)).sum()), abs=1e-10)
    # pixels of one color share a probability
    flat = index.ravel()
    for code in np.unique(flat):
        assert np.ptp(p.ravel()[flat == code]) < 1e-15


@pytest.mark.parametrize("seed", range(20))
def test_heatmap_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    pb, index, _ = _batch(rng, 8, 8, 5)
    logits = Tensor(rng.standard_normal(pb.counts.size), requires_grad=True)
    gt = rng.random(index.shape)
    gt /= gt.sum()
    assert check(lambda: PredictedHeatmap(logits, pb).cross_entropy(Heatmap(gt, True)), [logits]) < TOL


def test_uniform_prediction_ce_is_log_pixels():
    rng = np.random.default_rng(0)
    codes = ColorCodes.from_colors(rng.random((30, 3)))
    index = rng.integers(-1, 30, (224, 224))
    pb = PixelBatch.from_render(codes, index)
    pred = PredictedHeatmap(Tensor(np.zeros(pb.counts.size)), pb)
    from tavp.geometry import look_at_from_vectors
    from tavp.render import VirtualCamera

    gt = gt_heatmap(np.zeros(3), VirtualCamera(look_at_from_vectors([0, 0, 1], [0, 1, 0])))
    assert pred.cross_entropy(gt).item() == pytest.approx(math.log(50176), abs=1e-9)
    assert pred.entropy() == pytest.approx(math.log(50176), abs=1e-9)


def _scene_and_model():
    cfg = RunConfig(tasks="reach-clear-red")
    model = TavpModel(cfg.model_config(), seed=0)
    scene = generate_scene("reach-clear-red", 0)
    return model, scene


def _oracle_pred(scene, cams, rot_ok=True):
    local = scene.target_pos - scene.target_pos
    hms = [DenseHeatmap(gt_heatmap(local, c).values) for c in cams]
    rot = np.full((3, 72), -1e3)
    for a, b in enumerate(scene.gt_rotation_bins):
        rot[a, b] = 0.0 if rot_ok else -1e3
    return ActionPrediction(
        position=scene.target_pos.copy(),
        rotation_logp=Tensor(rot),
        gripper_prob=Tensor([float(scene.gt_gripper)]),
        collision_prob=Tensor([float(scene.gt_collision)]),
        view_heatmaps=hms,
        frame_center=scene.target_pos.copy(),
    )


def test_stage1_losses_at_optimum():
    model, scene = _scene_and_model()
    cams = model.canonical_cams()
    pred = _oracle_pred(scene, cams)
    lv, total = stage1_losses(pred, scene, cams)
    h = np.mean([DenseHeatmap(gt_heatmap(np.zeros(3), c).values).entropy() for c in cams])
    assert lv.l_hf == pytest.approx(h, abs=1e-9)  # CE(p, p) = H(p)
    assert lv.l_rot == 0.0
    assert lv.l_gri <= 1e-6 and lv.l_col <= 1e-6
    assert total.item() == pytest.approx(lv.as_array().sum())


@given(st.integers(0, 2**32 - 1))
def test_ce_bounded_below_by_target_entropy(seed):
    rng = np.random.default_rng(seed)
    gt = rng.random((7, 7))
    gt /= gt.sum()
    q = rng.random((7, 7)) + 1e-3
    q /= q.sum()
    assert DenseHeatmap(q).cross_entropy(Heatmap(gt, True)).item() >= DenseHeatmap(gt).entropy() - 1e-12


def test_heatmap_loss_needs_a_valid_view():
    model, scene = _scene_and_model()
    cams = model.canonical_cams()
    hms = [DenseHeatmap(np.full((224, 224), 1 / 50176)) for _ in cams]
    with pytest.raises(NoSignalError):
        heatmap_loss(hms, cams, np.array([0, 0, 10.0]), 1.5, 3.0)


def test_oracle_coarse_returns_target():
    cfg = RunConfig(tasks="reach-clear-red", oracle_coarse=True)
    model = TavpModel(cfg.model_config(), seed=0)
    scene = generate_scene("reach-clear-red", 2)
    si = model.scene_inputs(scene)
    assert np.array_equal(model.coarse_focus(si, None), scene.target_pos)


def test_uniform_coarse_heatmaps_tie_break_deterministic():
    model, scene = _scene_and_model()
    si = model.scene_inputs(scene)
    uni = [PredictedHeatmap(Tensor(np.zeros(pb.counts.size)), pb) for pb in si.coarse_pixels]
    a = model.coarse_focus(si, uni)
    b = model.coarse_focus(si, uni)
    assert np.array_equal(a, b)


def test_reference_losses_deterministic_and_finite():
    model, scene = _scene_and_model()
    si = model.scene_inputs(scene)
    a = reference_losses(si, model, focus=scene.target_pos)
    b = reference_losses(si, model, focus=scene.target_pos)
    assert np.array_equal(a.as_array(), b.as_array())
    assert np.all(np.isfinite(a.as_array())) and np.all(a.as_array() >= 0)


def test_policy_shapes_and_ranges():
    model, scene = _scene_and_model()
    local = model.local_cloud(scene, scene.target_pos)
    feats = np.concatenate([model.policy_features(local, s) for s in (1, 2)])
    g, value = model.policy(feats, batch=2)
    assert g.mu.shape == (2, 3, 5) and value.shape == (2,)
    assert g.log_sigma.data.min() >= -5 and g.log_sigma.data.max() <= 2
    poses = model.poses_from_raw(g.mu.data[0])
    assert len(poses) == 3 and all(0.75 <= p.r <= 1.3 for p in poses)


def test_canonical_poses():
    from tavp.geometry import RadialBounds, look_at_extrinsics

    poses = canonical_poses(RadialBounds())
    fwd = [look_at_extrinsics(p).forward for p in poses]
    np.testing.assert_allclose(fwd[0], [-1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(fwd[1], [0, -1, 0], atol=1e-12)
    np.testing.assert_allclose(fwd[2], [0, 0, -1], atol=1e-12)
    assert all(p.r == pytest.approx(1.025) for p in poses)


def test_frozen_copy_is_independent():
    model, _ = _scene_and_model()
    ref = model.frozen_copy()
    assert ref.store.digest() == model.store.digest()
    model.store["rot.b"].data[0] += 1.0
    assert ref.store.digest() != model.store.digest()


def test_mvep_partition():
    model, _ = _scene_and_model()
    mv, rest = set(model.mvep_names()), set(model.non_mvep_names())
    assert mv and rest and not (mv & rest)
    assert mv | rest == set(model.store.names())
    assert any(n.startswith("value.") for n in mv)
