"""Coupled Loop-subdivision FEM/BEM for structural acoustics of thin shells."""

__version__ = "0.1.0"
