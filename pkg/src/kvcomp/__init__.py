"""Cascade pruning + hierarchical quantization of int8 KV caches, an accelerator
cycle/energy model, and a two-stage design-space exploration harness."""

__version__ = "0.1.0"
