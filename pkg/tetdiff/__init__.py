"""tetdiff: diffusion-based mesh generation on deformable tetrahedral grids."""

__version__ = "0.1.0"
