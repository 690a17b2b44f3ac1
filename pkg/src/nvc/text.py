"""Devanagari text normalization and grapheme ids."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass

CHARSET_VERSION = 1
PAD = "\u0000"
# space, comma, danda, double danda, then the whole Devanagari block
_EXTRA = [" ", ",", "।", "॥"]
CHARSET = [PAD] + _EXTRA + [chr(c) for c in range(0x0900, 0x0980) if chr(c) not in _EXTRA]
CHAR_TO_ID = {c: i for i, c in enumerate(CHARSET)}
_WS = re.compile(r"\s+")


class TextError(ValueError):
    pass


@dataclass(frozen=True)
class TextSequence:
    ids: tuple[int, ...]
    text: str
    dropped: int = 0
    charset_version: int = CHARSET_VERSION

    def __len__(self):
        return len(self.ids)


def normalize_text(raw: str) -> TextSequence:
    """NFC, collapse whitespace, drop characters outside the charset, map to ids.

    Raises ``TextError("no usable text")`` if nothing survives, and rejects
    ``|`` since manifests are pipe-delimited.
    """
    if "|" in raw:
        raise TextError("text contains '|', which is reserved as the manifest delimiter")
    s = unicodedata.normalize("NFC", raw)
    s = _WS.sub(" ", s).strip()
    kept = [c for c in s if c in CHAR_TO_ID and c != PAD]
    dropped = len(s) - len(kept)
    text = _WS.sub(" ", "".join(kept)).strip()
    if not text:
        raise TextError("no usable text")
    return TextSequence(tuple(CHAR_TO_ID[c] for c in text), text, dropped)
