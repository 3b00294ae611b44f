"""Fourier-mixing vision-language bridge trained against frozen encoders, in numpy."""

__version__ = "0.1.0"
