"""Kinetic crowd dynamics and stress-level estimation."""
