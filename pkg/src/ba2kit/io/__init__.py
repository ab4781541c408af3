"""
Dataset readers and model persistence.
"""
