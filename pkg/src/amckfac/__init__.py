"""Second-order (KFAC) training with simulated in-memory analog matrix inversion."""

__version__ = "0.1.0"
