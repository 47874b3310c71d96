"""goalsift: a desk-scale lab for target-feasibility evaluation in planning agents."""

__version__ = "0.1.0"
