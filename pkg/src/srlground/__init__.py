"""srlground: a desk-scale laboratory for video object grounding with
semantic roles — corpus ingestion, contrastive sampling, sample assembly,
a small autodiff core, grounding models, the evaluation protocol, and a
synthetic relational corpus generator.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, DataError, GroundingError,
                     ShapeError, ValidationError)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "GroundingError",
    "ShapeError",
    "ValidationError",
    "__version__",
]
