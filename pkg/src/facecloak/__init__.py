"""Identity-specific face cloaking: learn one perturbation per person that keeps
face recognition systems from matching their images."""

from .core import (
    AnchorPair,
    BudgetMap,
    CloakMask,
    Embedding,
    EvalReport,
    ImagePlane,
    load_cloak,
    save_cloak,
)
from .errors import FaceCloakError
from .optimizer import AnchorPool, OptimizerConfig, apply_cloak, optimize_cloak, protect, select_anchors
from .synthgen import generate_variants

__version__ = "0.1.0"

__all__ = [
    "AnchorPair", "AnchorPool", "BudgetMap", "CloakMask", "Embedding", "EvalReport", "FaceCloakError",
    "ImagePlane", "OptimizerConfig", "apply_cloak", "generate_variants", "load_cloak", "optimize_cloak",
    "protect", "save_cloak", "select_anchors",
]
