"""fglsim: a simulation engine for federated graph learning."""

__version__ = "0.1.0"
