"""Dropless mixture-of-experts layer built on block-sparse products."""
