"""Adaptive parabolic solver on polygonal meshes with a posteriori estimators."""

__version__ = "0.1.0"
