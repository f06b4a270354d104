"""waterwas - water-wide association study pipeline."""

__version__ = "0.1.0"
