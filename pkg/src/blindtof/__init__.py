"""Off-grid spike recovery for time-of-flight traces with known or unknown kernels."""

__version__ = "0.1.0"
