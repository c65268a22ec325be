"""Neural-network SDE option models: calibration by Monte Carlo SGD or through a finite-difference PDE."""

__version__ = "0.1.0"
