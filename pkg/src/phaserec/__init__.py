"""Surgical phase recognition over per-frame feature sequences.

Temporal-aware feature refinement, windowed transformer classification,
and a 0-1 surgical progress index, with a training and evaluation harness
that runs at desk scale on synthetic corpora.
"""

__version__ = "0.1.0"
