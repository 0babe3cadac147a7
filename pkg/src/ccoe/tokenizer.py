"""Byte-level tokenizer: ids 0-255 are raw bytes, plus four specials.

No trained vocabulary; any UTF-8 text round-trips. The indicator token is
reserved for the planner's routing readout position.
"""

from __future__ import annotations

BYTE_VOCAB = 256
PAD = 256
BOS = 257
EOS = 258
INDICATOR = 259
VOCAB_SIZE = 260


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids: list[int]) -> str:
    return bytes(i for i in ids if 0 <= i < BYTE_VOCAB).decode("utf-8", errors="replace")
