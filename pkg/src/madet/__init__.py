"""Pixel-wise microaneurysm detection in retinal fundus images.

A small maxout/dropout convolutional network scores a window around every
candidate pixel; connected probability regions are filtered by area and
convexity. See the README for the command-line pipeline.
"""

__version__ = "0.1.0"
