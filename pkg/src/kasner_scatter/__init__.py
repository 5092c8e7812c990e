"""Scattering from Cauchy data at t=1 to asymptotic data at the Kasner singularity and back."""

__version__ = "0.1.0"
