import numpy as np
import pytest

from voxmt import GroundTruth, Pipeline, run_pipeline
from voxmt.config import PROFILES
from voxmt.errors import ConfigError, InputError
from voxmt.model import init_weights
from voxmt.refine import NOT_IN_BOX
from voxmt.tta import make_tta_set
from voxmt.voxelizer import PointCloud

TOY = PROFILES["toy"]


def test_totality_and_shapes(toy_scene, toy_weights):
    res = Pipeline(TOY, toy_weights).run(toy_scene.cloud)
    n = len(toy_scene.cloud)
    assert res.s_1st.shape == res.s_final.shape == (n, TOY.num_classes)
    np.testing.assert_allclose(res.s_final.sum(axis=1), 1.0, atol=1e-9)
    sem, inst = res.panoptic
    assert sem.shape == inst.shape == (n,)
    assert len(res.boxes) > 0 and inst.max() > 0
    # every instance lies in one box and carries a thing class
    for k in np.unique(inst[inst > 0]):
        members = inst == k
        assert len(set(res.index[members].tolist())) == 1
        assert np.isin(sem[members], TOY.thing_classes).all()
    assert (inst[res.index == NOT_IN_BOX] == 0).all()


def test_deterministic(toy_scene, toy_weights):
    pipe = Pipeline(TOY, toy_weights)
    a, b = pipe.run(toy_scene.cloud), pipe.run(toy_scene.cloud)
    assert np.array_equal(a.s_final, b.s_final)
    assert a.boxes == b.boxes


def test_zero_boxes_leaves_first_stage_untouched(toy_scene, toy_weights):
    res = Pipeline(TOY.replace(score_thresh=1.0), toy_weights).run(toy_scene.cloud)
    assert res.boxes == []
    assert np.array_equal(res.s_final, res.s_1st)
    assert not res.panoptic.instance.any()


def test_identity_gcp_passes_bottleneck_through(toy_scene):
    cfg = TOY.replace(gcp_mode="identity")
    first = Pipeline(cfg, init_weights(cfg, 0)).first_stage(toy_scene.cloud)
    bottom, bridged = first.unet.encoder_bottom, first.unet.bridge_out
    assert np.array_equal(bottom.coords, bridged.coords)
    assert np.array_equal(bottom.features, bridged.features)
    assert first.bev.shape == (cfg.bev_channels_in, 4, 4)


def test_out_of_range_points_get_fallback_scores(toy_weights):
    cloud = PointCloud.from_arrays(np.array([[0.0, 0.0, 0.0], [500.0, 0.0, 0.0]]))
    res = Pipeline(TOY, toy_weights).run(cloud)
    np.testing.assert_array_equal(res.s_1st[1], np.eye(TOY.num_classes)[TOY.fallback_class])


def test_empty_cloud(toy_weights):
    res = run_pipeline(PointCloud.from_arrays(np.zeros((0, 3))), TOY, toy_weights)
    assert res.s_final.shape == (0, TOY.num_classes) and res.panoptic.semantic.shape == (0,)


def test_loss_report(toy_scene, toy_weights):
    gt = GroundTruth(toy_scene.semantic, toy_scene.instance, toy_scene.boxes)
    rep = Pipeline(TOY, toy_weights).run(toy_scene.cloud, gt).loss
    assert set(rep.components) == {"ce_v", "lovasz_v", "hm", "reg", "iou", "ce_bev", "lovasz_bev"}
    assert all(np.isfinite(v) and v >= 0 for v in rep.components.values())
    assert set(rep.extras) == {"stage2_box_ce", "stage2_point_bce"}
    assert np.isfinite(rep.total)


def test_tta_changes_only_semantic_scores(toy_scene, toy_weights):
    pipe = Pipeline(TOY, toy_weights)
    cloud = PointCloud(toy_scene.cloud.data[:1500])
    plain = pipe.run(cloud)
    ident = pipe.run(cloud, tta=make_tta_set()[:1])
    assert np.array_equal(plain.s_final, ident.s_final)
    full = pipe.run(cloud, tta=make_tta_set())
    assert full.boxes == plain.boxes
    np.testing.assert_allclose(full.s_1st.sum(axis=1), 1.0, atol=1e-9)


def test_errors_carry_stage_prefix(toy_weights):
    bad = PointCloud.__new__(PointCloud)
    object.__setattr__(bad, "data", np.full((2, 5), np.nan))
    with pytest.raises(InputError, match=r"^\[voxelize\]"):
        Pipeline(TOY, toy_weights).run(bad)


def test_weight_mismatch_is_config_error(toy_weights):
    with pytest.raises(ConfigError):
        Pipeline(TOY.replace(gcp_mode="identity"), toy_weights)
