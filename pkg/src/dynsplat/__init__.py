"""dynsplat: prior-driven dynamic Gaussian splatting on a CPU, desk scale."""

__version__ = "0.1.0"
