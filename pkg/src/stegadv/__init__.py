"""Steganography-aware adversarial image tooling.

The attack side turns a continuous adversarial image into an integer image
whose pixel moves minimize a steganographic cost while staying adversarial;
the defense side detects such images with residual co-occurrence features.
"""

__version__ = "0.1.0"
