"""
RegCD

Bi-temporal image registration and change detection toolkit: hierarchical matching,
RANSAC homography, overlap-masked tile detection and a synthetic distortion benchmark.
"""

__version__ = "1.0.0"
