"""vecplan: vectorized-scene trajectory planning with instance-level constraints."""

__version__ = "0.1.0"
