"""Conditional diffusion for 2D-to-3D single-cell shape reconstruction, with morphometrics,
naive baselines, evaluation and a random-forest augmentation study."""
__version__ = "0.1.0"
