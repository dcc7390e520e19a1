"""Specification-conditioned cooling control: reward search, expert pools and hypernetwork policy generation."""

__version__ = "0.1.0"
