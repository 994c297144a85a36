"""kernelrules: rule-program extraction from binarized CNN kernel activations.

The pipeline: compute per-kernel feature-map norms, binarize them against
mean/std thresholds, induce a stratified default theory over the bits,
optionally relabel kernel predicates with the semantic concepts they
detect, then execute and evaluate the resulting decision list with full
per-instance justifications.
"""

from .errors import (
    AlignmentError,
    CollisionError,
    ConfigError,
    DegenerateInputError,
    EmptyInputError,
    EmptyRegionError,
    FormatError,
    IoError,
    KernelRulesError,
    MissingColumnError,
    MissingDataError,
    ParseError,
    StratificationError,
)
from .induction import FoldParams, learn_exceptions, learn_ruleset, select_literal
from .inference import Justification, Metrics, evaluate, justify, predict
from .interchange import (
    BinarizationTable,
    FeatureMap,
    Manifest,
    NormsTable,
    SegmentationMask,
    load_bits,
    load_feature_map,
    load_manifest,
    load_mask,
    load_norms,
    save_feature_map,
    save_manifest,
    save_mask,
    write_table,
)
from .labeller import (
    ConceptScores,
    PixelRegion,
    feature_region,
    iou_concept,
    label_kernel,
    label_ruleset,
)
from .quantize import (
    ThresholdVector,
    binarize,
    compute_norm,
    compute_thresholds,
    filter_top_softmax,
)
from .rules import (
    LabelMap,
    Literal,
    Predicate,
    Rule,
    RuleSet,
    RuleSetStats,
    apply_labels,
    parse_ruleset,
    print_ruleset,
    resolve_labels,
    stats,
)

__version__ = "0.1.0"
