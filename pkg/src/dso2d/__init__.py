"""Fine-tuning a toy 2D shape generator for physical stability with simulator feedback."""

__version__ = "0.1.0"
