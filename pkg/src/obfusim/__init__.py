"""Desk-scale simulator for RL-driven browsing-profile obfuscation."""

__version__ = "0.1.0"
