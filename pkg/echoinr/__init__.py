"""
echoinr: ultrasound deconvolution with implicit neural representations
Hash-grid INR fitted through a differentiable B-mode renderer, with a
Richardson-Lucy baseline and synthetic phantom tooling
"""

__version__ = "1.0.0"
__author__ = "echoinr developers"
