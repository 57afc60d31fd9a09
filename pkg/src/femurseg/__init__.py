"""Joint fetal-femur segmentation and endpoint localization on CPU."""

__version__ = "0.1.0"
