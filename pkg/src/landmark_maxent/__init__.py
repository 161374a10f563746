"""Constrained maximum-entropy models for 2D landmark displacements."""

from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .dataset import (  # noqa: E402
    ConstraintSet,
    Dataset,
    MomentStatistics,
    Preprocessor,
    compute_bare_moments,
    compute_intersubject_moments,
    detect_null_modes,
    load_dataset,
    write_dataset,
)
from .errors import (  # noqa: E402
    ConstraintViolationError,
    DivergenceError,
    InputError,
    LandmarkMaxentError,
    NumericalError,
    ParseError,
    PreconditionError,
)
from .gaussian import GaussianModel, fit_gaussian, fit_variant, pseudo_inverse  # noqa: E402
from .kernels import BACKEND  # noqa: E402

__all__ = [
    "BACKEND",
    "ConstraintSet",
    "ConstraintViolationError",
    "Dataset",
    "DivergenceError",
    "GaussianModel",
    "InputError",
    "LandmarkMaxentError",
    "MomentStatistics",
    "NumericalError",
    "ParseError",
    "PreconditionError",
    "Preprocessor",
    "compute_bare_moments",
    "compute_intersubject_moments",
    "detect_null_modes",
    "fit_gaussian",
    "fit_variant",
    "load_dataset",
    "pseudo_inverse",
    "write_dataset",
    "__version__",
]
