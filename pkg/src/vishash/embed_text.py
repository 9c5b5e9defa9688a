"""Transcript features and the non-learned text baselines.

A transcript becomes a single feature vector by averaging the word
embeddings of its cleaned tokens (out-of-vocabulary tokens are skipped,
not errors).  Two baselines operate directly on tokens: snapping, which
forces tags whose names appear verbatim in the text, and voting, where
each token votes for its nearest tag in embedding space.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import NoKnownTokens, ParseError, UnknownLabel

_EDGE = re.compile(r"^[^a-z0-9]+|[^a-z0-9]+$")


def tokenize_clean(words) -> list[str]:
    """Lowercase, strip non-alphanumeric edges, drop tokens shorter than 2.

    Interior punctuation is kept ("co2-emissions" stays one token); order
    is preserved.
    """
    out = []
    for w in words:
        t = _EDGE.sub("", w.lower())
        if len(t) >= 2:
            out.append(t)
    return out


class EmbeddingTable:
    """word -> D-dimensional vector map; lookup is lowercase-normalized."""

    def __init__(self, dim: int, entries: dict[str, np.ndarray]):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.entries: dict[str, np.ndarray] = {}
        for w, v in entries.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (dim,):
                raise ValueError(f"vector for {w!r} has shape {v.shape}, want ({dim},)")
            self.entries[w.lower()] = v

    @property
    def vocab_size(self) -> int:
        return len(self.entries)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.entries

    def get(self, word: str) -> np.ndarray | None:
        return self.entries.get(word.lower())

    def save(self, path: str | os.PathLike) -> None:
        """Write the standard text format: "vocab dim" header, then rows."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.vocab_size} {self.dim}\n")
            for w in sorted(self.entries):
                vec = " ".join(repr(float(x)) for x in self.entries[w])
                fh.write(f"{w} {vec}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EmbeddingTable":
        """Read the text format; tolerates Windows line endings."""
        with open(path, encoding="utf-8", newline="") as fh:
            header = fh.readline().rstrip("\r\n").split()
            if len(header) != 2:
                raise ParseError("expected 'vocab dim' header", line=1)
            try:
                n, dim = int(header[0]), int(header[1])
            except ValueError as e:
                raise ParseError(str(e), line=1) from e
            entries = {}
            for ln, line in enumerate(fh, start=2):
                line = line.rstrip("\r\n")
                if not line:
                    continue
                parts = line.split(" ")
                if len(parts) != dim + 1:
                    raise ParseError(
                        f"expected word + {dim} values, got {len(parts)} fields", line=ln
                    )
                try:
                    entries[parts[0]] = np.array([float(x) for x in parts[1:]])
                except ValueError as e:
                    raise ParseError(str(e), line=ln) from e
        if len(entries) != n:
            raise ParseError(f"header says {n} words, file has {len(entries)}", line=1)
        return cls(dim, entries)


@dataclass(frozen=True)
class TextFeature:
    vector: np.ndarray
    n_known: int
    n_total: int


def embed_mean(tokens, table: EmbeddingTable) -> TextFeature:
    """Mean embedding over the tokens found in the table.

    Multiset semantics: repeated tokens contribute repeatedly.  When no
    token is known the feature is the zero vector with n_known = 0.
    """
    tokens = list(tokens)
    vecs = [v for t in tokens if (v := table.get(t)) is not None]
    if vecs:
        vector = np.mean(vecs, axis=0)
    else:
        vector = np.zeros(table.dim)
    return TextFeature(vector=vector, n_known=len(vecs), n_total=len(tokens))


def _tag_tokens(tag: str) -> tuple[str, ...]:
    return tuple(tokenize_clean(tag.split()))


def snap_tags(tokens, tag_vocab) -> set[str]:
    """Tags whose (cleaned) name appears verbatim among the tokens.

    Multi-word tags match as consecutive token runs.  Output is a subset
    of the vocabulary, in original tag spelling.
    """
    tokens = list(tokens)
    found = set()
    for tag in tag_vocab:
        parts = _tag_tokens(tag)
        if not parts:
            continue
        k = len(parts)
        for i in range(len(tokens) - k + 1):
            if tuple(tokens[i : i + k]) == parts:
                found.add(tag)
                break
    return found


def tag_embeddings(tag_vocab, table: EmbeddingTable) -> np.ndarray:
    """Stack one embedding per tag (mean of word embeddings for multi-word tags)."""
    tags = list(tag_vocab)
    mat = np.zeros((len(tags), table.dim))
    for i, tag in enumerate(tags):
        vecs = [v for w in _tag_tokens(tag) if (v := table.get(w)) is not None]
        if not vecs:
            raise UnknownLabel(f"tag {tag!r} has no embedded words")
        mat[i] = np.mean(vecs, axis=0)
    return mat


def vote_counts(tokens, table: EmbeddingTable, tag_vocab) -> np.ndarray:
    """Votes per tag: each known token votes for its nearest tag by cosine
    similarity (similarity ties go to the lowest tag index).

    Raises NoKnownTokens when every token is out of vocabulary.
    """
    tags = list(tag_vocab)
    tag_mat = tag_embeddings(tags, table)
    norms = np.linalg.norm(tag_mat, axis=1)
    norms[norms == 0] = 1.0
    tag_unit = tag_mat / norms[:, None]

    votes = np.zeros(len(tags), dtype=np.int64)
    n_known = 0
    for t in tokens:
        v = table.get(t)
        if v is None:
            continue
        n_known += 1
        nv = np.linalg.norm(v)
        sims = tag_unit @ (v / nv if nv > 0 else v)
        votes[int(np.argmax(sims))] += 1
    if n_known == 0:
        raise NoKnownTokens("no transcript token has an embedding")
    return votes


def vote_tags(tokens, table: EmbeddingTable, tag_vocab, k: int) -> list[str]:
    """Top-k tags by descending vote count, ties by ascending tag index."""
    tags = list(tag_vocab)
    votes = vote_counts(tokens, table, tags)
    order = sorted(range(len(tags)), key=lambda i: (-votes[i], i))
    return [tags[i] for i in order[:k]]


def rank_tags_with_snap(model_ranking: list[str], snapped: set[str], k: int) -> list[str]:
    """Prepend snapped tags (by model-ranking order), fill the rest from the model.

    Snapped tags missing from the ranking are appended after the ranked
    snapped ones, sorted by name.
    """
    head = [t for t in model_ranking if t in snapped]
    head += sorted(snapped.difference(head))
    tail = [t for t in model_ranking if t not in snapped]
    return (head + tail)[:k]
