"""Greedy log-det sentence selection for fine-tuning."""

from ._core import *  # noqa: F401,F403
from ._core import (
    Dataset,
    DesignMatrix,
    InvalidArgument,
    InvalidState,
    NumericalFailure,
    ParseError,
    PartialResultsError,
    Sentence,
    UnsupportedSize,
)

__version__ = "0.1.0"
