"""Gradient-flow optimization of quantum control objectives over Kraus maps."""
