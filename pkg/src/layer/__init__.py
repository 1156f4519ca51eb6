"""Layer-wise occlusion explainability for volumetric classifiers."""

__version__ = "1.0.0"
