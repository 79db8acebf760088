"""Silhouette-guided reconstruction and structure-preserving deformation of segmented 3D models."""

__version__ = "0.1.0"
