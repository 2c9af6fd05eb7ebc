"""
Semiparametric calculus for fused data on finite spaces.
"""

__version__ = "0.1.0"
