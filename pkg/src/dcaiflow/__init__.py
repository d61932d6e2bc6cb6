"""Geo-distributed DNN (re)training workflow toolkit."""

__version__ = "0.1.0"
