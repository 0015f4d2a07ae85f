"""
Utility Functions Module

Configuration loading, error types and file I/O shared across the package.
"""
