"""Sparse patch-graph visual odometry backend."""
