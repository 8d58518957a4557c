"""Random walk on supercritical percolation clusters: sampling, correctors and
effective-diffusivity estimators."""

__version__ = "0.1.0"
