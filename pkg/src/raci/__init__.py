"""Role-aware conditional inference for daily ecosystem flux prediction.

Modules
-------
core        site-year data model, calendar, validation
synthetic   process-based benchmark generator
encoders    per-scale input encoders
hierarchy   attention aggregation and gated propagation across scales
retrieval   geographic monthly context and functional yearly retrieval
model       configuration, parameters, forward/backward, prediction
training    optimizer loop, gradient check, fine-tuning, MC dropout
evaluation  metrics, ablation and sensitivity tables, attention exports
storage     dataset, checkpoint and run-directory formats
cli         command-line interface
"""

from __future__ import annotations

from .core import CalendarSpec, Dataset, SiteMeta, SiteYearSample, validate_dataset
from .model import RaciConfig
from .training import TrainConfig, train

__all__ = ["CalendarSpec", "Dataset", "SiteMeta", "SiteYearSample", "validate_dataset", "RaciConfig",
           "TrainConfig", "train"]
__version__ = "0.1.0"
