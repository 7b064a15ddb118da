"""Federated elective-course recommendation across schools.

The package trains a shared recommendation model without moving student
records between schools.  Each school builds a heterogeneous graph over its
students, the common course catalog, and locally observed activities, encodes
nodes with multi-head graph attention, and fits a constrained matrix
factorization on top of the encoded representations.  A coordinator
aggregates per-school gradients of the shared parameters; student
representations never leave their school.
"""

from fedcourse.errors import ConfigError, DatasetError, ProtocolError, TrainingError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DatasetError",
    "ProtocolError",
    "TrainingError",
    "__version__",
]
