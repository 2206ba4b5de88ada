"""Desk-scale signal-to-video conditioning pipeline.

Two training stages sit on a tiny reverse-mode tensor library:

* stage 1 aligns an encoded sensor signal with text, image, and action
  embeddings through contrastive and multi-label objectives;
* stage 2 retrieves supporting entries from a mixture-of-memories pool,
  fuses them into a conditioning sequence, and trains a small diffusion
  decoder to reconstruct short clips from that condition.

Everything runs on synthetic data with a known latent linkage, so retrieval,
routing, and reconstruction can be verified against exact oracles.
"""

__version__ = "0.1.0"
