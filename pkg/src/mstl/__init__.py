"""Multi-stage transfer learning with decoupled class-balanced classifier retraining."""

__version__ = "0.1.0"
