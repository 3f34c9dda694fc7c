""" version for tensortrack"""

__version__ = "0.1.0"
