"""kcross: learned full-reference quality scoring for synthesized MR slices.

The score combines three feature branches - a complex-valued k-space
branch, a lesion branch behind a frozen pluggable segmenter, and a shared
structure branch - trained in two stages against 10-level human ratings,
plus the ranking-based inconsistency harness used to compare metrics
against those ratings.
"""

__version__ = "0.1.0"
