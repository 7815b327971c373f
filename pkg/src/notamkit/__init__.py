"""Knowledge-grounded NOTAM deep parsing with self-optimizing refinement."""

__version__ = "0.1.0"
