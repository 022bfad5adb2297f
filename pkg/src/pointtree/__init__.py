"""Coarse-to-fine recursive point cloud generation with part discovery.

A point cloud is grown from a single root point by repeatedly splitting
every point into a handful of children inside a shrinking radius, with one
shared network deciding each split. The expansion tree that results gives
every generated point an ancestry, and cutting the tree at a chosen depth
yields an unsupervised part segmentation. The package carries its own
reverse-mode autodiff, exact nearest-neighbour search, training loop,
generation metrics, and file formats, all on plain numpy.
"""

__version__ = "0.1.0"
