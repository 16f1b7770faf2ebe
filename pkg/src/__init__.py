"""
RegCD Package
"""

__version__ = "1.0.0"
__description__ = "Registration-aware change detection for bi-temporal imagery"
