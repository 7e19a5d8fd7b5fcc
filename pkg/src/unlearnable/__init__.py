"""Unlearnable image datasets via confounder noise generators, with evaluation tooling."""

__version__ = "0.1.0"
