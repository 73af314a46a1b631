import math
from fractions import Fraction

import numpy as np
import pytest
import torch

from wsvsod import boosting as B
from wsvsod import losses as L
from wsvsod.data import BACKGROUND, FOREGROUND, SynthConfig, synthesize_clip
from wsvsod.errors import DataFormatError, NumericalError
from wsvsod.training import TrainConfig


@pytest.fixture(scope="module")
def clip20():
    return synthesize_clip(SynthConfig(T=20, H=32, W=32, min_size=8, max_size=12), seed=11)


def _maps_with_qualified(clip, qualified):
    """External maps whose fused product equals the mask on qualified frames and 0 elsewhere."""
    p_rgb = np.zeros(clip.masks.shape, np.float32)
    for t in qualified:
        p_rgb[t] = clip.masks[t]
    return p_rgb, np.ones_like(p_rgb)


def test_fusion_closed_forms(rng):
    p = rng.random((4, 4))
    assert np.array_equal(B.fuse_saliency(p, np.ones((4, 4))), p)
    a = np.zeros((4, 4))
    a[:2] = 1
    assert not B.fuse_saliency(a, 1 - a).any()
    assert B.fuse_saliency(np.array([0.8]), np.array([0.5]))[0] == pytest.approx(0.4)
    with pytest.raises(ValueError):
        B.fuse_saliency(np.zeros(3), np.zeros(4))


def test_quality_score_extremes():
    s = np.zeros((4, 4), np.uint8)
    s[0, :2] = FOREGROUND
    s[3, :] = BACKGROUND
    p = np.zeros((4, 4))
    p[0, :] = 1
    assert B.quality_score(p, s) == 1.0
    assert B.quality_score(np.zeros((4, 4)), s) == 0.0


def test_quality_score_hand_count():
    s = np.zeros((4, 4), np.uint8)
    s[0, :3] = FOREGROUND
    s[3, :] = BACKGROUND
    p = np.zeros((4, 4))
    p[0, :2] = 0.9  # two of three foreground strokes
    p[3, 0] = 0.7  # one of four background strokes
    assert B.score_fraction(p, s) == Fraction(1, 2)
    assert B.quality_score(p, s) == 0.5


def test_quality_score_needs_both_stroke_kinds():
    s = np.zeros((4, 4), np.uint8)
    s[0, 0] = FOREGROUND
    with pytest.raises(ValueError):
        B.quality_score(np.ones((4, 4)), s)


@pytest.mark.parametrize("T,qualified,dense", [(20, [1, 7, 13], 3), (20, [4], 0), (10, [2], 0)])
def test_stage1_ratio_rule(clip20, T, qualified, dense):
    clip = clip20.subclip(0, T)
    assert clip.annotated.all()
    labels = B.build_stage1([clip], [_maps_with_qualified(clip, qualified)])[0]
    assert labels.n_dense == dense
    for t, e in enumerate(labels.entries):
        if e.kind == B.SCRIBBLE:
            assert np.array_equal(e.payload, clip.scribbles[t])
            assert e.provenance == "original"
        else:
            assert t in qualified and e.provenance == "stage1"


def test_stage1_missing_maps_is_data_error(clip20):
    with pytest.raises(DataFormatError):
        B.build_stage1([clip20], [None])
    p_rgb, p_m = _maps_with_qualified(clip20, [])
    with pytest.raises(DataFormatError):
        B.build_stage1([clip20], [(p_rgb[:5], p_m[:5])])


def test_stage2_skips_clips_without_dense_entries(clip20):
    d_b1 = B.PseudoLabelSet.from_scribbles(clip20)
    assert B.build_stage2(clip20, d_b1) is d_b1


def test_stage2_iteration_budget(monkeypatch):
    clip = synthesize_clip(SynthConfig(T=12, H=32, W=32, min_size=8, max_size=12), seed=2)
    d_b1 = B.build_stage1([clip], [_maps_with_qualified(clip, range(12))])[0]
    seen = {}

    def fake_train(cfg, dataset, params_in=None, pseudo=None, **kw):
        seen["iterations"], seen["variant"], seen["clips"] = cfg.iterations, cfg.variant, len(dataset)
        raise NumericalError("stop here")

    monkeypatch.setattr("wsvsod.training.train", fake_train)
    out = B.build_stage2(clip, d_b1, TrainConfig(input_size=32))
    assert seen == {"iterations": 96, "variant": "B", "clips": 1}
    # divergence falls back to the stage-one labels
    assert out is d_b1


def test_stage2_is_deterministic_and_relabels_every_frame():
    clip = synthesize_clip(SynthConfig(T=4, H=32, W=32, min_size=8, max_size=12), seed=5)
    d_b1 = B.build_stage1([clip], [_maps_with_qualified(clip, [0, 2])])[0]
    cfg = TrainConfig(input_size=32, lr=1e-3)
    a = B.build_stage2(clip, d_b1, cfg, iters_per_frame=2)
    b = B.build_stage2(clip, d_b1, cfg, iters_per_frame=2)
    assert a.n_dense == 4 and all(e.provenance == "stage2" for e in a.entries)
    for ea, eb in zip(a.entries, b.entries):
        assert ea.payload.tobytes() == eb.payload.tobytes()


def test_mixed_supervision_loss():
    target = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
    dense = B.PseudoEntry(B.DENSE, target)
    assert B.mixed_supervision_loss(torch.from_numpy(target.copy()), dense).item() <= 2e-7
    half = torch.full((2, 2), 0.5)
    assert B.mixed_supervision_loss(half, dense).item() == pytest.approx(math.log(2), rel=1e-6)
    s = np.array([[1, 2], [0, 1]], np.uint8)
    pred = torch.tensor([[0.7, 0.4], [0.2, 0.9]])
    scrib = B.PseudoEntry(B.SCRIBBLE, s)
    assert B.mixed_supervision_loss(pred, scrib).item() == L.partial_ce(pred, s).item()


def test_pseudo_label_round_trip(tmp_path, clip20):
    d_b1 = B.build_stage1([clip20], [_maps_with_qualified(clip20, [0, 5, 9])])[0]
    d_b1.save(str(tmp_path))
    back = B.PseudoLabelSet.load(str(tmp_path))
    assert back.clip_id == clip20.clip_id
    for a, b in zip(d_b1.entries, back.entries):
        assert (a.kind, a.provenance) == (b.kind, b.provenance)
        if a.kind == B.DENSE:
            assert np.abs(a.payload - b.payload).max() <= 0.5 / 255 + 1e-6
        else:
            assert np.array_equal(a.payload, b.payload)


def test_external_maps_round_trip_and_missing_frame(tmp_path, rng):
    p = B.quantize_maps(rng.random((3, 8, 8)))
    B.save_external_maps(str(tmp_path), p, p[::-1])
    r, m = B.load_external_maps(str(tmp_path), 3)
    assert np.array_equal(r, p) and np.array_equal(m, p[::-1])
    (tmp_path / "external" / "flow" / "00001.png").unlink()
    with pytest.raises(DataFormatError, match="00001"):
        B.load_external_maps(str(tmp_path), 3)


def test_fabricated_maps_quality_tracks_good_flags(clip20):
    p_rgb, p_m, good = B.fabricate_external_maps(clip20.masks, 0.5, np.random.default_rng(0))
    fused = B.fuse_saliency(p_rgb, p_m)
    chosen = set(B.select_frames(fused, clip20.scribbles))
    assert chosen == set(np.flatnonzero(good))
