"""
Few-shot Gaussian splatting with dense depth priors aligned to SfM points.
"""
__version__ = "0.1.0"
