"""Multiscale spectral GFEM for 2D elliptic problems with rough coefficients."""
