"""Unicode text statistics: script classification, word counting, language checks.

All rules here are deterministic and model-independent; they back both the
query-language inference and the rule-based scorers.
"""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from functools import lru_cache

# East Asian scripts are folded into a single "cjk" tag: mixed Chinese,
# Japanese, and Korean text should compare as one script family.
_CJK_PREFIXES = ("CJK", "HIRAGANA", "KATAKANA", "HANGUL")
_SCRIPT_BY_PREFIX = {
    "LATIN": "latin",
    "CYRILLIC": "cyrillic",
    "GREEK": "greek",
    "ARABIC": "arabic",
    "HEBREW": "hebrew",
}

_WORD_RE = re.compile(r"\w+", re.UNICODE)


@lru_cache(maxsize=None)
def char_script(ch: str) -> str:
    """Script tag for a single character ("latin", "cjk", ..., "other")."""
    name = unicodedata.name(ch, "")
    if not name:
        return "other"
    prefix = name.split(" ", 1)[0]
    if prefix in _CJK_PREFIXES:
        return "cjk"
    return _SCRIPT_BY_PREFIX.get(prefix, "other")


def is_cjk(ch: str) -> bool:
    return char_script(ch) == "cjk"


def dominant_script(text: str) -> str:
    """Most frequent script among the letters of ``text``.

    Digits and punctuation are ignored. Text without letters defaults to
    "latin". Ties resolve to the lexicographically smallest tag so the
    result is stable.
    """
    counts: Counter[str] = Counter(char_script(ch) for ch in text if ch.isalpha())
    if not counts:
        return "latin"
    best = max(counts.values())
    return min(tag for tag, n in counts.items() if n == best)


def script_ratio(text: str, script: str) -> float:
    """Fraction of letters in ``text`` belonging to ``script``; 1.0 if no letters."""
    letters = [ch for ch in text if ch.isalpha()]
    if not letters:
        return 1.0
    hits = sum(1 for ch in letters if char_script(ch) == script)
    return hits / len(letters)


def tokens(text: str) -> list[str]:
    """Unicode word segmentation; every CJK character is its own token."""
    out: list[str] = []
    for match in _WORD_RE.finditer(text):
        run: list[str] = []
        for ch in match.group():
            if is_cjk(ch):
                if run:
                    out.append("".join(run))
                    run = []
                out.append(ch)
            else:
                run.append(ch)
        if run:
            out.append("".join(run))
    return out


def count_tokens(text: str) -> int:
    return len(tokens(text))
