"""Geometry-aware GAN augmentation pipeline on a procedural toy-CT benchmark."""

__version__ = "0.1.0"
