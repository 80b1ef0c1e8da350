"""Spoofing-aware speaker verification: ASV and CM sub-systems, a shared
back-end classifier trained with the sub-systems fixed or jointly, EER
metrics, a synthetic corpus generator and an experiment CLI."""

__version__ = "0.1.0"
