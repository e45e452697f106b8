"""Verify-then-pay settlement kernel: mandates, scoped agent tokens, PoTE bundles, simulated rails."""

from .core import Amount, Digest, canonical_serialize, commit, hash256, merkle_root
from .errors import TessPayError
from .tiers import Tier, classify_tier

__version__ = "0.1.0"

__all__ = [
    "Amount", "Digest", "canonical_serialize", "commit", "hash256", "merkle_root",
    "TessPayError", "Tier", "classify_tier", "__version__",
]
