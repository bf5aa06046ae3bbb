"""Quantify what multi-energy load data is worth.

Train per-sector load forecasters end to end through a differentiable
two-stage dispatch model of an energy hub, then split the realized cost
savings across the electricity, heat and cooling sectors with a clipped
Shapley mechanism.
"""

__version__ = "0.1.0"
