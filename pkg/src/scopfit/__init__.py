"""Shape-constrained additive models fitted by penalized Newton iteration."""
from .assembly import AssembledModel, build
from .data import DataTable, Factor, read_csv, write_csv
from .family import get_family
from .fit import FitResult, newton_fit
from .formula import FormulaError, ModelSpec, parse

__all__ = [
    "AssembledModel",
    "DataTable",
    "Factor",
    "FitResult",
    "FormulaError",
    "ModelSpec",
    "build",
    "get_family",
    "newton_fit",
    "parse",
    "read_csv",
    "write_csv",
]

__version__ = "0.1.0"
