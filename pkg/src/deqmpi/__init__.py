"""Deep-equilibrium and classical reconstruction for magnetic particle imaging."""
from ._backend import name as backend_name

__version__ = "0.1.0"
