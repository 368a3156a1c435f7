"""
Tests for the kNN quantile forecaster
"""
