"""Evaluation machinery: answer normalization, accuracy, ROUGE-L, significance.

Answer normization follows the usual VQA recipe: lowercase, strip punctuation,
collapse whitespace, then replace synonym phrases longest-match-first. ROUGE-L
tokenizes by whitespace after the same normalization.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class LengthMismatchError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def _basic_normalize(text: str) -> str:
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


class SynonymTable:
    """Phrase rewrites applied after basic normalization.

    Both sides of every entry are normalized on load; canonical phrases map to
    themselves, and no surface phrase may properly contain a canonical phrase,
    which is what makes normalize_answer idempotent.
    """

    def __init__(self, mapping: Mapping[str, str] | None = None):
        entries: dict[tuple[str, ...], tuple[str, ...]] = {}
        canonicals: set[tuple[str, ...]] = set()
        for surface, canonical in (mapping or {}).items():
            s = tuple(_basic_normalize(surface).split())
            c = tuple(_basic_normalize(canonical).split())
            if not s or not c:
                raise ValueError("empty phrase in synonym table")
            entries[s] = c
            canonicals.add(c)
        for c in canonicals:
            if entries.get(c, c) != c:
                raise ValueError(f"canonical phrase {' '.join(c)!r} must map to itself")
            entries[c] = c
        for s in entries:
            for c in canonicals:
                if s != c and _contains_phrase(s, c):
                    raise ValueError(
                        f"surface {' '.join(s)!r} contains canonical {' '.join(c)!r}; "
                        f"that would break idempotence"
                    )
        self._entries = entries
        self._max_len = max((len(s) for s in entries), default=0)

    def __len__(self) -> int:
        return len(self._entries)

    def replace(self, words: Sequence[str]) -> list[str]:
        if not self._entries:
            return list(words)
        out: list[str] = []
        i = 0
        while i < len(words):
            match = None
            for width in range(min(self._max_len, len(words) - i), 0, -1):
                candidate = tuple(words[i:i + width])
                if candidate in self._entries:
                    match = candidate
                    break
            if match is None:
                out.append(words[i])
                i += 1
            else:
                out.extend(self._entries[match])
                i += len(match)
        return out

    @classmethod
    def from_file(cls, path) -> "SynonymTable":
        """Load UTF-8 lines of the form 'surface<TAB>canonical'."""
        mapping: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line.strip():
                    continue
                if "\t" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'surface<TAB>canonical'")
                surface, canonical = line.split("\t", 1)
                mapping[surface] = canonical
        return cls(mapping)


def _contains_phrase(haystack: tuple[str, ...], needle: tuple[str, ...]) -> bool:
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def normalize_answer(text: str, synonyms: SynonymTable | None = None) -> str:
    words = _basic_normalize(text).split()
    if synonyms is not None:
        words = synonyms.replace(words)
    return " ".join(words)


def accuracy(predictions: Sequence[str], references: Sequence[str],
             synonyms: SynonymTable | None = None) -> float:
    if len(predictions) != len(references):
        raise LengthMismatchError(
            f"{len(predictions)} predictions vs {len(references)} references")
    if not predictions:
        raise LengthMismatchError("need at least one prediction")
    hits = sum(
        normalize_answer(p, synonyms) == normalize_answer(r, synonyms)
        for p, r in zip(predictions, references)
    )
    return hits / len(predictions)


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # one-row dynamic program
    prev = [0] * (len(b) + 1)
    for x in a:
        row = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                row.append(prev[j - 1] + 1)
            else:
                row.append(max(prev[j], row[-1]))
        prev = row
    return prev[-1]


def rouge_l(candidate_tokens: Sequence[str], reference_tokens: Sequence[str]) -> RougeScore:
    """Longest-common-subsequence precision/recall/F1."""
    if not candidate_tokens or not reference_tokens:
        raise EmptySequenceError("rouge_l needs non-empty token sequences")
    lcs = _lcs_length(candidate_tokens, reference_tokens)
    precision = lcs / len(candidate_tokens)
    recall = lcs / len(reference_tokens)
    if precision + recall == 0.0:
        return RougeScore(precision, recall, 0.0)
    return RougeScore(precision, recall, 2.0 * precision * recall / (precision + recall))


def mcnemar(b: int, c: int) -> float:
    """Continuity-corrected McNemar statistic from the discordant counts."""
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    if b + c == 0:
        return 0.0
    return max(abs(b - c) - 1, 0) ** 2 / (b + c)


def paired_bootstrap(scores_a: Sequence[float], scores_b: Sequence[float],
                     n_resamples: int = 1000, seed: int = 0) -> float:
    """One-sided paired bootstrap p-value for mean(a) > mean(b).

    Resamples case indices with replacement; p is the fraction of resamples
    where the mean difference is <= 0. Deterministic for a fixed seed.
    """
    if len(scores_a) != len(scores_b):
        raise LengthMismatchError(f"{len(scores_a)} vs {len(scores_b)} scores")
    if len(scores_a) < 2:
        raise LengthMismatchError("paired bootstrap needs at least 2 cases")
    if n_resamples < 100:
        raise ValueError("use at least 100 resamples")
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x6273,)))
    n = len(a)
    losses = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        if a[idx].mean() - b[idx].mean() <= 0.0:
            losses += 1
    return losses / n_resamples


@dataclass
class EvalReport:
    accuracy: float
    rouge_l_f1: float
    n_cases: int
    mcnemar_stat: float | None = None
    bootstrap_p: float | None = None

    def __post_init__(self):
        count = self.accuracy * self.n_cases
        if abs(count - round(count)) > 1e-9:
            raise ValueError("accuracy must be a whole number of cases over n_cases")

    def to_json(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "rouge_l_f1": self.rouge_l_f1,
            "n_cases": self.n_cases,
        }
        if self.mcnemar_stat is not None:
            out["mcnemar_stat"] = self.mcnemar_stat
        if self.bootstrap_p is not None:
            out["bootstrap_p"] = self.bootstrap_p
        return out
