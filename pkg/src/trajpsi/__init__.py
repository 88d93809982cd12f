"""Private location-intersection for contact tracing with Paillier PSI."""

__version__ = "0.1.0"
