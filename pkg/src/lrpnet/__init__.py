"""Sparse voxel segmentation engine with long range pooling."""
