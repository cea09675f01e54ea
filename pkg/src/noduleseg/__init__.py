"""Weakly supervised nodule segmentation from clinical aspect-ratio annotations.

Two-stage pipeline: box prompts derived from two crossing diameters drive a
promptable segmenter to produce candidate masks, which are reduced to
intersection/union pseudo-labels plus an XOR uncertainty map; two small
encoder-decoder networks are then trained with an uncertainty-masked
cross-teaching objective.
"""

__version__ = "0.1.0"
