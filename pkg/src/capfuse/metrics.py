"""Corpus-level BLEU@4 with brevity penalty, multi-reference capable.

Modified n-gram precision clips each candidate n-gram's count at the
maximum count over that candidate's references, aggregated corpus-wide.
The brevity penalty uses closest-reference lengths (ties toward the
shorter reference). No smoothing: a zero match count at any order zeroes
the score.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError


@dataclass
class EvalPair:
    """One candidate sentence with at least one reference, surface tokens."""

    clip_id: str
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise ConfigError(f"clip {self.clip_id!r} has no references")


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def modified_ngram_precision(pairs: list[EvalPair], n: int) -> tuple[int, int]:
    """(clipped match count, candidate n-gram count) summed over the corpus."""
    if n < 1:
        raise ConfigError(f"n-gram order must be >= 1, got {n}")
    matched = 0
    total = 0
    for pair in pairs:
        cand = _ngram_counts(pair.candidate, n)
        total += sum(cand.values())
        if not cand:
            continue
        max_ref: Counter = Counter()
        for ref in pair.references:
            for gram, count in _ngram_counts(ref, n).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        matched += sum(min(count, max_ref[gram]) for gram, count in cand.items())
    return matched, total


def closest_ref_length(candidate_len: int, ref_lens: Sequence[int]) -> int:
    """Reference length nearest to the candidate's, ties toward shorter."""
    return min(ref_lens, key=lambda r: (abs(r - candidate_len), r))


@dataclass
class BleuResult:
    score: float
    precisions: list[tuple[int, int]]  # (matched, total) for n = 1..4
    brevity_penalty: float
    candidate_length: int
    reference_length: int

    def to_dict(self) -> dict:
        return {
            "bleu4": self.score,
            "precisions": [
                {"order": i + 1, "matched": m, "total": t}
                for i, (m, t) in enumerate(self.precisions)
            ],
            "brevity_penalty": self.brevity_penalty,
            "candidate_length": self.candidate_length,
            "reference_length": self.reference_length,
        }

    def format_report(self) -> str:
        lines = [f"BLEU@4 = {self.score:.4f} ({self.score * 100:.2f}%)"]
        for i, (m, t) in enumerate(self.precisions):
            p = m / t if t else 0.0
            lines.append(f"  p{i + 1} = {p:.4f} ({m}/{t})")
        lines.append(
            f"  brevity penalty = {self.brevity_penalty:.4f} "
            f"(candidate length {self.candidate_length}, reference length {self.reference_length})"
        )
        return "\n".join(lines)


def bleu4_report(pairs: list[EvalPair]) -> BleuResult:
    if not pairs:
        raise ConfigError("empty evaluation corpus")
    precisions = [modified_ngram_precision(pairs, n) for n in range(1, 5)]
    c = sum(len(p.candidate) for p in pairs)
    r = sum(
        closest_ref_length(len(p.candidate), [len(ref) for ref in p.references])
        for p in pairs
    )
    bp = 1.0 if c >= r or c == 0 else math.exp(1.0 - r / c)
    if any(m == 0 or t == 0 for m, t in precisions):
        score = 0.0
    else:
        log_mean = sum(math.log(m / t) for m, t in precisions) / 4.0
        score = bp * math.exp(log_mean)
    return BleuResult(score, precisions, bp, c, r)


def bleu4_corpus(pairs: list[EvalPair]) -> float:
    """Corpus BLEU@4 in [0, 1]."""
    return bleu4_report(pairs).score
