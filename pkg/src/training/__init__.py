"""Toy-scale training on synthetic clustered regression data."""
