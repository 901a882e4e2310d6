"""Desk-scale toolkit for pruning transformers and their sparse autoencoders."""

__version__ = "0.1.0"
