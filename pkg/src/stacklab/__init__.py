"""Block-tower stability lab."""
__version__ = "0.1.0"
