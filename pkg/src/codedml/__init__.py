"""Coded distributed computation and coded data shuffling."""

from .codes import MdsCodeSpec, RepetitionCodeSpec, UncodedSpec, make_code, parse_code
from .errors import CodedError

__version__ = "0.1.0"

__all__ = ["MdsCodeSpec", "RepetitionCodeSpec", "UncodedSpec", "make_code", "parse_code", "CodedError", "__version__"]
