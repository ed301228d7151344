"""Class-wise federated averaging simulator."""

__version__ = "0.1.0"
