"""Personalized simulators for heterogeneous agents from one offline trajectory each."""

from ._alloc import tune_allocator

tune_allocator()

__version__ = "0.1.0"
