import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from partvos.config import PartsConfig
from partvos.geometry import BoundingBox, box_iou, containment_score, mask_box, tighten_box
from partvos.part_gen import PartGenerationError, generate_parts, region_iou, sample_proposals

from oracles import box_raster, nms_reference


def ellipse_mask(h, w, cx, cy, rx, ry):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0


def square_mask(size=100, frame=400):
    m = np.zeros((frame, frame), bool)
    lo = (frame - size) // 2
    m[lo : lo + size, lo : lo + size] = True
    return m


def test_single_proposal_is_reproducible():
    m = square_mask(20, 60)
    a = sample_proposals(m, 1, seed=11)
    assert len(a) == 1 and a == sample_proposals(m, 1, seed=11)
    assert a[0].inside(60, 60)


def test_proposals_stay_in_expanded_region():
    m = square_mask(100, 400)  # object occupies [150, 250)
    boxes = sample_proposals(m, 2000, seed=0)
    assert len(boxes) == 2000
    for b in boxes:
        cx, cy = b.x + b.w / 2, b.y + b.h / 2
        assert 140 - 0.5 <= cx <= 260 + 0.5 and 140 - 0.5 <= cy <= 260 + 0.5
        assert 19 <= b.w <= 61 and 19 <= b.h <= 61


def test_proposals_clip_to_frame():
    m = np.zeros((50, 50), bool)
    m[:, :] = True
    for b in sample_proposals(m, 500, seed=1):
        assert b.inside(50, 50)


def test_proposal_centers_uniform_chi_square():
    m = square_mask(100, 400)
    boxes = sample_proposals(m, 100_000, seed=2)
    cx = np.array([b.x + b.w / 2 for b in boxes])
    cy = np.array([b.y + b.h / 2 for b in boxes])
    for c in (cx, cy):
        counts, _ = np.histogram(c, bins=12, range=(140, 260))
        assert counts.sum() > 99_000
        assert stats.chisquare(counts).pvalue > 1e-3


def test_empty_mask_rejected():
    with pytest.raises(PartGenerationError):
        sample_proposals(np.zeros((10, 10), bool), 5, 0)
    with pytest.raises(PartGenerationError):
        generate_parts(np.zeros((10, 10), bool), PartsConfig(), 0)


def test_region_iou():
    m = np.zeros((10, 10), bool)
    m[0:4, 0:4] = True
    assert region_iou(BoundingBox(0, 0, 4, 4), m) == 1.0
    assert region_iou(BoundingBox(0, 0, 2, 4), m) == 0.5
    assert region_iou(BoundingBox(6, 6, 2, 2), m) == 0.0


def test_full_frame_mask_has_unit_purity():
    m = np.ones((60, 80), bool)
    obj = mask_box(m)
    assert obj == BoundingBox(0, 0, 80, 60)
    assert all(containment_score(b, obj) == 1.0 for b in sample_proposals(m, 300, 4))
    parts = generate_parts(m, PartsConfig(min_count=1), seed=4)
    assert parts


@pytest.fixture(scope="module")
def davis_like():
    return ellipse_mask(480, 854, 430, 250, 150, 100)


def test_davis_like_part_count_in_band(davis_like):
    parts = generate_parts(davis_like, PartsConfig(), seed=0)
    assert 50 <= len(parts) <= 300


def test_generate_parts_is_deterministic(davis_like):
    a = generate_parts(davis_like, PartsConfig(), seed=9)
    b = generate_parts(davis_like, PartsConfig(), seed=9)
    assert [(p.id, p.box) for p in a] == [(p.id, p.box) for p in b]


def test_emitted_parts_satisfy_filters(davis_like):
    cfg = PartsConfig()
    parts = generate_parts(davis_like, cfg, seed=3)
    obj = mask_box(davis_like)
    assert [p.id for p in parts] == list(range(len(parts)))
    for p in parts:
        assert region_iou(p.box, davis_like) >= cfg.iou_min
        assert containment_score(p.box, obj) > cfg.purity_min
        assert p.local_mask.any()
        assert np.array_equal(p.local_mask, davis_like[p.box.slices])
        assert tighten_box(p.box, davis_like) == p.box


def test_generate_parts_matches_reference_pipeline():
    """Rebuild the whole filter chain with the pixel-enumeration oracles."""
    h, w = 48, 56
    mask = ellipse_mask(h, w, 28, 24, 16, 12)
    cfg = PartsConfig(n_proposals=250, min_count=1, nms_overlap=0.5)
    obj = mask_box(mask)
    proposals = sample_proposals(mask, cfg.n_proposals, 17, cfg.center_expand, (cfg.side_min, cfg.side_max))
    obj_raster = box_raster(obj, w, h)
    candidates, scores = [], []
    for b in proposals:
        r = box_raster(b, w, h)
        iou = (r & mask).sum() / (r | mask).sum()
        purity = (r & obj_raster).sum() / r.sum()
        if iou >= cfg.iou_min and purity > cfg.purity_min:
            candidates.append(b)
            scores.append(iou)
    keep = nms_reference(candidates, scores, cfg.nms_overlap, w, h)
    for i in keep:
        for j in keep:
            if i < j:
                assert box_iou(candidates[i], candidates[j]) <= cfg.nms_overlap
    expected = [tighten_box(candidates[k], mask) for k in keep][: cfg.max_count]
    assert [p.box for p in generate_parts(mask, cfg, 17)] == expected


def test_cap_and_minimum():
    mask = ellipse_mask(200, 200, 100, 100, 60, 50)
    assert len(generate_parts(mask, PartsConfig(max_count=12), 0)) == 12
    tiny = np.zeros((40, 40), bool)
    tiny[20, 20] = True
    with pytest.raises(PartGenerationError, match="too small"):
        generate_parts(tiny, PartsConfig(), 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(20, 60), st.integers(20, 60), st.integers(0, 2**16))
def test_part_count_never_exceeds_cap(rx, ry, seed):
    mask = ellipse_mask(140, 140, 70, 70, rx, ry)
    parts = generate_parts(mask, PartsConfig(n_proposals=1000, min_count=1, max_count=40), seed)
    assert len(parts) <= 40
