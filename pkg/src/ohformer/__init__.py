"""
ohformer - desk-scale omni-relational high-order transformer for person re-identification.
"""

__version__ = "0.1.0"
