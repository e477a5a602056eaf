"""Behaviour tags and deterministic hashing shared by the synthetic backends.

The synthetic policy writes a one-line header into every candidate it emits::

    # ttc-behavior: arch=naive_mode compiled=1 correct=1 speedup=1.284512 key=5f0c...

The synthetic evaluator reads nothing else from the code.
"""

from __future__ import annotations

import hashlib
import re
from typing import NamedTuple, Optional

MASK64 = (1 << 64) - 1
TAG_PREFIX = "# ttc-behavior:"
TAG_REGEX = re.compile(
    r"^# ttc-behavior: arch=(?P<arch>[a-z_]+) compiled=(?P<compiled>[01]) "
    r"correct=(?P<correct>[01]) speedup=(?P<speedup>[0-9.eE+-]+) "
    r"key=(?P<key>[0-9a-f]{16})(?: z=(?P<z>[0-9.eE+-]+))?$",
    flags=re.MULTILINE,
)


class BehaviorTag(NamedTuple):
    arch: str
    compiled: bool
    correct: bool
    speedup: float
    key: int
    z: float = 0.0

    def render(self) -> str:
        return (
            f"{TAG_PREFIX} arch={self.arch} compiled={int(self.compiled)} "
            f"correct={int(self.correct)} speedup={self.speedup:.6f} "
            f"key={self.key:016x} z={self.z:.9f}"
        )


def parse_tag(code: str) -> Optional[BehaviorTag]:
    match = TAG_REGEX.search(code)
    if match is None:
        return None
    return BehaviorTag(
        arch=match["arch"],
        compiled=match["compiled"] == "1",
        correct=match["correct"] == "1",
        speedup=float(match["speedup"]),
        key=int(match["key"], 16),
        z=float(match["z"] or 0.0),
    )


def mix64(*values: int) -> int:
    """Fold integers into one 64-bit value with the splitmix64 finalizer."""
    state = 0x9E3779B97F4A7C15
    for value in values:
        state = (state ^ (value & MASK64)) & MASK64
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        state ^= state >> 30
        state = (state * 0xBF58476D1CE4E5B9) & MASK64
        state ^= state >> 27
        state = (state * 0x94D049BB133111EB) & MASK64
        state ^= state >> 31
    return state


def unit_interval(*values: int) -> float:
    """Map integers to a float in [0, 1)."""
    return (mix64(*values) >> 11) / float(1 << 53)


def hash_text(text: str) -> int:
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")
