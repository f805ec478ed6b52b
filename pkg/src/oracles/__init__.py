"""Brute-force references used by the tests and the validation suites."""
