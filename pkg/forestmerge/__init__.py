"""
forestmerge: one-shot parallel MCMC combined by a random-forest classifier.
"""

__version__ = "0.1.0"
