"""Desk-scale multispeaker voice cloning: speaker encoder, mel synthesizer, vocoder."""

__version__ = "0.1.0"
