"""Semantic labelling of significant kernels.

For every kernel that appears as a predicate in the rule set, its feature
maps on the top-m images (ranked by feature-map norm) are bilinearly
resized to the mask resolution and thresholded at ``tau`` times their
maximum to form pixel regions. Each region is scored against every
concept of the image's segmentation mask as

    iou(c) = |pixels of c inside the region| / |region|,

the scores are summed over the m images, normalized over concepts and
sorted descending; every concept within ``margin`` of the top score joins
the kernel's label. Concept names are concatenated with underscores and
a per-concept occurrence counter appends a numeric suffix, so the second
kernel labelled with ``cabinets`` becomes ``cabinets2_...``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, EmptyRegionError, MissingDataError
from .interchange import FeatureMap, SegmentationMask
from .rules import LabelMap, RuleSet

DEFAULT_TAU = 0.5
DEFAULT_MARGIN = 0.05
DEFAULT_TOP_M = 10


@dataclass(frozen=True)
class PixelRegion:
    """The activated pixel set of one kernel on one image."""

    image_id: str
    member: np.ndarray  # shape (height, width), bool

    def __post_init__(self):
        object.__setattr__(self, "member", np.asarray(self.member, dtype=bool))
        if self.member.ndim != 2:
            raise ValueError("region must be 2D")

    @property
    def height(self):
        return self.member.shape[0]

    @property
    def width(self):
        return self.member.shape[1]

    @property
    def size(self):
        return int(self.member.sum())


@dataclass(frozen=True)
class ConceptScores:
    """Normalized concept scores of one kernel, descending."""

    kernel_id: int
    scores: tuple[tuple[str, float], ...]

    def __post_init__(self):
        values = [s for _, s in self.scores]
        if values:
            if abs(sum(values) - 1.0) > 1e-9:
                raise ValueError("concept scores must sum to 1")
            if any(b > a for a, b in zip(values, values[1:])):
                raise ValueError("concept scores must be sorted descending")

    def within_margin(self, margin: float) -> tuple[str, ...]:
        """Concepts whose score is >= top_score - margin, in score order."""
        if not self.scores:
            return ()
        top = self.scores[0][1]
        return tuple(name for name, s in self.scores if s >= top - margin)


def resize_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centre sampling and edge clamping.

    Source coordinate for output pixel x is ``(x + 0.5) * in/out - 0.5``,
    the convention shared by the common image libraries.
    """
    values = np.asarray(values, dtype=np.float64)
    in_h, in_w = values.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, in_h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, in_w - 1).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = values[np.ix_(y0, x0)] * (1 - wx) + values[np.ix_(y0, x1)] * wx
    bottom = values[np.ix_(y1, x0)] * (1 - wx) + values[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def feature_region(featmap: FeatureMap, out_h: int, out_w: int,
                   tau: float = DEFAULT_TAU) -> PixelRegion:
    """Resize the feature map and keep pixels at >= tau of its maximum.

    A map whose maximum is not positive yields an empty region.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be positive")
    if not (0 < tau <= 1):
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    resized = resize_bilinear(featmap.values, out_h, out_w)
    peak = resized.max()
    if peak <= 0:
        member = np.zeros((out_h, out_w), dtype=bool)
    else:
        member = resized >= tau * peak
    return PixelRegion(image_id=featmap.image_id, member=member)


def iou_concept(region: PixelRegion, mask: SegmentationMask) -> dict[str, float]:
    """Per-concept share of the region: |c ∩ region| / |region|.

    The denominator is the region size. An empty region scores nothing.
    Concepts are keyed by name; ids sharing a name pool their pixels.
    """
    if (region.height, region.width) != (mask.height, mask.width):
        raise AlignmentError(
            f"region {region.height}x{region.width} does not match "
            f"mask {mask.height}x{mask.width}"
        )
    total = region.size
    if total == 0:
        return {}
    scores: dict[str, float] = {}
    inside = mask.concept_ids[region.member]
    ids, counts = np.unique(inside, return_counts=True)
    for cid, count in zip(ids.tolist(), counts.tolist()):
        name = mask.concept_names[cid]
        scores[name] = scores.get(name, 0.0) + count / total
    return scores


_SANITIZE_RE = re.compile(r"[^a-z0-9]+")


def sanitize_concept(name: str) -> str:
    """Turn a mask concept name into a predicate-friendly token."""
    token = _SANITIZE_RE.sub("_", name.strip().lower()).strip("_")
    if not token:
        raise ValueError(f"concept name {name!r} sanitizes to nothing")
    if not token[0].isalpha():
        token = "c_" + token
    return token


def label_kernel(kernel_id: int, featmaps_with_masks, margin: float,
                 tau: float = DEFAULT_TAU) -> tuple[str, ConceptScores]:
    """Score one kernel against the concepts of its top-m images.

    ``featmaps_with_masks`` pairs each feature map with the segmentation
    mask of the same image. Raw scores are summed across images, zero-sum
    concepts dropped, the rest normalized; the label is the ``_`` join of
    every concept within ``margin`` of the best (suffix digits are the
    caller's job). Raises EmptyRegionError when every region is empty.
    """
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    pairs = list(featmaps_with_masks)
    if not pairs:
        raise MissingDataError(f"kernel {kernel_id}: no feature maps supplied")
    sums: dict[str, float] = {}
    any_region = False
    for featmap, mask in pairs:
        region = feature_region(featmap, mask.height, mask.width, tau)
        if region.size == 0:
            continue
        any_region = True
        for name, score in iou_concept(region, mask).items():
            sums[name] = sums.get(name, 0.0) + score
    if not any_region:
        raise EmptyRegionError(
            f"kernel {kernel_id}: every region over {len(pairs)} images is empty"
        )
    positive = {name: s for name, s in sums.items() if s > 0}
    total = sum(positive.values())
    normalized = sorted(
        ((name, s / total) for name, s in positive.items()),
        key=lambda item: (-item[1], item[0]),
    )
    scores = ConceptScores(kernel_id=kernel_id, scores=tuple(normalized))
    concepts = scores.within_margin(margin)
    label = "_".join(sanitize_concept(c) for c in concepts)
    return label, scores


def label_ruleset(rs: RuleSet, data, m: int = DEFAULT_TOP_M,
                  margin: float = DEFAULT_MARGIN,
                  tau: float = DEFAULT_TAU) -> LabelMap:
    """Build the kernel -> label map for every significant kernel of *rs*.

    ``data`` maps kernel id to its (feature map, mask) pairs already
    ranked by descending feature-map norm; only the first ``m`` pairs are
    used. Suffix counters run per concept name in kernel-id order, so the
    first kernel using ``cabinets`` gets ``cabinets1``, the next
    ``cabinets2``, independently of the other concepts in the label.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    counters: dict[str, int] = {}
    entries: dict[int, str] = {}
    for kid in rs.kernel_universe:
        if kid not in data:
            raise MissingDataError(f"no feature maps/masks for kernel {kid}")
        _, scores = label_kernel(kid, data[kid][:m], margin=margin, tau=tau)
        parts = []
        for concept in scores.within_margin(margin):
            token = sanitize_concept(concept)
            counters[token] = counters.get(token, 0) + 1
            parts.append(f"{token}{counters[token]}")
        entries[kid] = "_".join(parts)
    return LabelMap(entries=entries)
