"""Multi-annotator consensus captioning for cytology image tiles."""

from .fusion import FusedDescription, FusionPolicy, fuse_consensus
from .pipeline import DatasetRecord, run_pipeline
from .refine import FinalDescription, refine_expert
from .schema import DimensionAssertion, MorphDimension, StructuredCaption, TbsCategory, Verdict

__version__ = "0.1.0"

__all__ = [
    "DatasetRecord",
    "DimensionAssertion",
    "FinalDescription",
    "FusedDescription",
    "FusionPolicy",
    "MorphDimension",
    "StructuredCaption",
    "TbsCategory",
    "Verdict",
    "fuse_consensus",
    "refine_expert",
    "run_pipeline",
]
