"""
Test package for forestmerge.
"""
