"""Household socioeconomic-position prediction from satellite and household imagery."""

__version__ = "0.1.0"
