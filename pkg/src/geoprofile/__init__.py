"""Profile-likelihood inference for anisotropic Matern geostatistical models."""

from .model import BoxCox, Dataset, DatasetError, NaturalParams, ScaleParams, read_csv, write_csv

__version__ = "0.1.0"

__all__ = [
    "BoxCox",
    "Dataset",
    "DatasetError",
    "NaturalParams",
    "ScaleParams",
    "read_csv",
    "write_csv",
    "__version__",
]
