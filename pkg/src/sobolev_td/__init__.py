"""First-order Sobolev temporal-difference learning."""

__version__ = "0.1.0"
