"""racekit: a desk-scale head-to-head autonomous racing kit."""

__version__ = "0.1.0"
