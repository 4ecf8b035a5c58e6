"""Voxel microstructure descriptors and persistence-image regression."""
