"""Region extraction, concept IoU, margin selection, and suffix assignment."""

import random

import numpy as np
import pytest

import oracles
from kernelrules.errors import AlignmentError, EmptyRegionError, MissingDataError
from kernelrules.interchange import FeatureMap, SegmentationMask
from kernelrules.labeller import (
    ConceptScores,
    PixelRegion,
    feature_region,
    iou_concept,
    label_kernel,
    label_ruleset,
    resize_bilinear,
    sanitize_concept,
)
from kernelrules.rules import Rule, RuleSet, kernel_predicate, Literal


def featmap(values, kid=0, image="img"):
    return FeatureMap(kernel_id=kid, image_id=image, values=np.asarray(values))


def mask(grid, names, image="img"):
    return SegmentationMask(image_id=image, concept_ids=np.asarray(grid),
                            concept_names=names)


def region_from(bits, image="img"):
    return PixelRegion(image_id=image, member=np.asarray(bits, dtype=bool))


def test_constant_positive_map_full_region():
    for tau in (0.1, 0.5, 1.0):
        region = feature_region(featmap(np.full((3, 3), 2.0)), 6, 6, tau)
        assert region.size == 36


def test_zero_map_empty_region():
    region = feature_region(featmap(np.zeros((3, 3))), 8, 8, 0.5)
    assert region.size == 0


def test_region_matches_bilinear_oracle():
    values = [[1.0, 0.0], [0.0, 0.0]]
    region = feature_region(featmap(values), 4, 4, tau=0.5)
    resized = oracles.bilinear_oracle(values, 4, 4)
    peak = max(max(row) for row in resized)
    expected = [
        [resized[y][x] >= 0.5 * peak for x in range(4)] for y in range(4)
    ]
    assert region.member.tolist() == expected


def test_resize_matches_oracle_on_random_maps():
    rng = np.random.default_rng(3)
    for _ in range(10):
        values = rng.random((5, 7))
        out = resize_bilinear(values, 13, 11)
        expected = oracles.bilinear_oracle(values.tolist(), 13, 11)
        assert np.allclose(out, expected, rtol=0, atol=1e-12)


def test_iou_full_region_gives_area_fractions():
    grid = [[1] * 10 for _ in range(6)] + [[2] * 10 for _ in range(4)]
    m = mask(grid, {1: "wall", 2: "bed"})
    region = region_from(np.ones((10, 10)))
    scores = iou_concept(region, m)
    assert scores == {"wall": 0.6, "bed": 0.4}


def test_iou_partial_region():
    grid = [[1] * 5 + [2] * 5 for _ in range(2)]
    m = mask(grid, {1: "door", 2: "floor"})
    member = np.zeros((2, 10), dtype=bool)
    member[0, :5] = True   # 5 pixels inside door
    member[1, 5:] = True   # 5 pixels inside floor
    scores = iou_concept(region_from(member), m)
    assert scores["door"] == 0.5
    assert scores["floor"] == 0.5


def test_iou_empty_region_empty_map():
    m = mask([[1]], {1: "wall"})
    assert iou_concept(region_from([[False]]), m) == {}


def test_iou_dimension_mismatch():
    m = mask([[1, 1]], {1: "wall"})
    with pytest.raises(AlignmentError):
        iou_concept(region_from([[True]]), m)


def test_iou_matches_pixel_loop_oracle():
    rng = random.Random(17)
    for _ in range(25):
        grid = [[rng.randint(0, 3) for _ in range(16)] for _ in range(16)]
        names = {i: f"c{i}" for i in range(4)}
        member = [[rng.random() < 0.4 for _ in range(16)] for _ in range(16)]
        ours = iou_concept(region_from(member), mask(grid, names))
        expected = oracles.iou_oracle(member, grid, names)
        assert ours == expected


def test_iou_scores_bounded_and_partitioned():
    rng = random.Random(23)
    for _ in range(10):
        grid = [[rng.randint(0, 2) for _ in range(8)] for _ in range(8)]
        names = {0: "a", 1: "b", 2: "c"}
        member = [[rng.random() < 0.5 for _ in range(8)] for _ in range(8)]
        scores = iou_concept(region_from(member), mask(grid, names))
        assert all(0.0 <= v <= 1.0 for v in scores.values())
        if scores:
            assert sum(scores.values()) == pytest.approx(1.0, abs=1e-9)


# -- label_kernel -------------------------------------------------------------

def checkerboard_inputs():
    """One image whose region lands 50/40/10 across three concepts."""
    values = np.zeros((10, 10), dtype=np.float32)
    values[:, :] = 1.0
    fm = featmap(values)
    grid = np.zeros((10, 10), dtype=np.int64)
    grid[:5, :] = 1          # 50 pixels: cabinets
    grid[5:9, :] = 2         # 40 pixels: door
    grid[9:, :] = 3          # 10 pixels: drawer
    m = mask(grid, {1: "cabinets", 2: "door", 3: "drawer"})
    return [(fm, m)]


def test_margin_example_cabinets_door():
    label, scores = label_kernel(12, checkerboard_inputs(), margin=0.1)
    assert label == "cabinets_door"
    assert [name for name, _ in scores.scores] == ["cabinets", "door", "drawer"]
    assert scores.scores[0][1] == pytest.approx(0.5, abs=1e-12)


def test_margin_zero_keeps_top_only():
    label, _ = label_kernel(12, checkerboard_inputs(), margin=0.0)
    assert label == "cabinets"


def test_margin_one_keeps_everything():
    label, _ = label_kernel(12, checkerboard_inputs(), margin=1.0)
    assert label == "cabinets_door_drawer"


def test_label_kernel_all_empty_regions():
    fm = featmap(np.zeros((4, 4)))
    m = mask(np.ones((8, 8), dtype=int), {1: "wall"})
    with pytest.raises(EmptyRegionError):
        label_kernel(0, [(fm, m)], margin=0.1)


def test_scores_sum_to_one_across_images():
    rng = np.random.default_rng(4)
    pairs = []
    for i in range(5):
        values = rng.random((6, 6))
        grid = rng.integers(0, 3, size=(12, 12))
        pairs.append((
            featmap(values, image=f"i{i}"),
            mask(grid, {0: "a", 1: "b", 2: "c"}, image=f"i{i}"),
        ))
    _, scores = label_kernel(1, pairs, margin=0.05)
    assert sum(s for _, s in scores.scores) == pytest.approx(1.0, abs=1e-9)


def test_margin_monotonicity_on_random_scores():
    rng = random.Random(55)
    margins = (0.05, 0.1, 0.15, 0.2)
    for _ in range(50):
        n = rng.randint(1, 6)
        raw = [rng.random() + 1e-6 for _ in range(n)]
        total = sum(raw)
        values = sorted((v / total for v in raw), reverse=True)
        scores = ConceptScores(
            kernel_id=0,
            scores=tuple((f"c{i}", v) for i, v in enumerate(values)),
        )
        sets = [set(scores.within_margin(m)) for m in margins]
        for smaller, larger in zip(sets, sets[1:]):
            assert smaller <= larger


# -- label_ruleset ------------------------------------------------------------

def two_kernel_ruleset():
    return RuleSet(rules=(
        Rule(label="x", exception=None,
             body=(Literal(predicate=kernel_predicate(7)),)),
        Rule(label="y", exception=None,
             body=(Literal(predicate=kernel_predicate(12)),)),
    ))


def block_pair(top_name, side_name, top_share, image):
    """A featmap/mask pair scoring top/side/padding at 0.5/0.4/0.1, or the
    top concept alone when ``top_share`` is 1.0."""
    values = np.ones((10, 10), dtype=np.float32)
    grid = np.zeros((10, 10), dtype=np.int64)
    if top_share == 1.0:
        grid[:, :] = 1
    else:
        grid[:5, :] = 1
        grid[5:9, :] = 2
        grid[9:, :] = 3
    return (
        featmap(values, image=image),
        mask(grid, {0: "padding", 1: top_name, 2: side_name, 3: "padding"},
             image=image),
    )


def test_suffixes_follow_kernel_order():
    data = {
        7: [block_pair("cabinets", "door", 1.0, "i1")],
        12: [block_pair("cabinets", "door", 0.6, "i2")],
    }
    labels = label_ruleset(two_kernel_ruleset(), data, m=1, margin=0.1)
    assert labels.entries[7] == "cabinets1"
    assert labels.entries[12] == "cabinets2_door1"


def test_single_kernel_single_concept():
    rs = RuleSet(rules=(
        Rule(label="x", exception=None,
             body=(Literal(predicate=kernel_predicate(0)),)),
    ))
    data = {0: [block_pair("wall", "wall2", 1.0, "i1")]}
    labels = label_ruleset(rs, data, m=1, margin=0.05)
    assert labels.entries[0] == "wall1"


def test_suffix_counters_match_recount_oracle():
    rng = random.Random(2)
    kernels = [1, 4, 9, 16, 25]
    rs = RuleSet(rules=tuple(
        Rule(label=f"c{k % 2}", exception=None,
             body=(Literal(predicate=kernel_predicate(k)),))
        for k in kernels
    ))
    concept_pool = ["wall", "bed", "sofa"]
    data = {}
    top_concepts = {}
    for k in kernels:
        top = rng.choice(concept_pool)
        side = rng.choice([c for c in concept_pool if c != top])
        share = rng.choice([1.0, 0.6])
        data[k] = [block_pair(top, side, share, f"i{k}")]
        top_concepts[k] = (top, side, share)
    labels = label_ruleset(rs, data, m=1, margin=0.1)

    counters = {}
    for k in sorted(kernels):
        top, side, share = top_concepts[k]
        concepts = [top] if share == 1.0 else [top, side]
        parts = []
        for c in concepts:
            counters[c] = counters.get(c, 0) + 1
            parts.append(f"{c}{counters[c]}")
        assert labels.entries[k] == "_".join(parts)


def test_missing_kernel_data():
    with pytest.raises(MissingDataError):
        label_ruleset(two_kernel_ruleset(), {7: [block_pair("a", "b", 1.0, "i")]},
                      m=1, margin=0.1)


def test_label_determinism():
    data = {
        7: [block_pair("cabinets", "door", 0.6, "i1")],
        12: [block_pair("door", "cabinets", 0.6, "i2")],
    }
    first = label_ruleset(two_kernel_ruleset(), data, m=1, margin=0.1)
    second = label_ruleset(two_kernel_ruleset(), data, m=1, margin=0.1)
    assert first.entries == second.entries


def test_sanitize_concept_names():
    assert sanitize_concept("Work Surface") == "work_surface"
    assert sanitize_concept("kitchen island") == "kitchen_island"
    assert sanitize_concept("3d-object") == "c_3d_object"
