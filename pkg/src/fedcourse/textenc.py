"""Deterministic text features for catalog descriptions.

Course and activity descriptions are embedded with signed feature hashing:
each token and token n-gram hashes to one coordinate and a sign, and a text's
raw vector is the coordinate-wise maximum over its features (max pooling over
the token sequence).  The raw vector is then reduced to the model dimension
with a learned affine map, ``relu(W e) + b``.  The hashing stage needs no
vocabulary, never sees data from other schools, and is fully determined by
the hash seed, so every school encodes the shared catalog identically.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Protocol

import numpy as np

if TYPE_CHECKING:
    from fedcourse.datasets import SchoolDataset

_WORD_RE = re.compile(r"[0-9a-z]+", re.ASCII)


def _is_cjk(ch: str) -> bool:
    code = ord(ch)
    return (
        0x3040 <= code <= 0x30FF  # kana
        or 0x3400 <= code <= 0x9FFF  # CJK ideographs
        or 0xF900 <= code <= 0xFAFF
        or 0xAC00 <= code <= 0xD7AF  # hangul
    )


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; runs of CJK characters become char 3-grams."""
    tokens: list[str] = []
    lowered = text.lower()
    run: list[str] = []

    def flush_run() -> None:
        if not run:
            return
        chunk = "".join(run)
        if len(chunk) <= 3:
            tokens.append(chunk)
        else:
            tokens.extend(chunk[i : i + 3] for i in range(len(chunk) - 2))
        run.clear()

    buf: list[str] = []

    def flush_buf() -> None:
        if buf:
            tokens.extend(_WORD_RE.findall("".join(buf)))
            buf.clear()

    for ch in lowered:
        if _is_cjk(ch):
            flush_buf()
            run.append(ch)
        else:
            flush_run()
            buf.append(ch)
    flush_run()
    flush_buf()
    return tokens


class TextEncoder(Protocol):
    """Anything that turns a description into a fixed-width raw vector."""

    @property
    def raw_dim(self) -> int: ...

    def encode(self, text: str) -> np.ndarray: ...


class HashingEncoder:
    """Signed feature hashing with max pooling.

    Features are single tokens plus token n-grams up to ``ngram`` wide.  Each
    feature contributes +1 or -1 at one coordinate; the text vector takes the
    coordinate-wise max over features (empty text encodes to zeros).
    """

    def __init__(self, raw_dim: int = 512, ngram: int = 2, seed: int = 0) -> None:
        if raw_dim < 1:
            raise ValueError("raw_dim must be positive")
        if ngram < 1:
            raise ValueError("ngram must be at least 1")
        self._raw_dim = raw_dim
        self._ngram = ngram
        self._key = seed.to_bytes(8, "little", signed=True)

    @property
    def raw_dim(self) -> int:
        return self._raw_dim

    def _slot(self, feature: str) -> tuple[int, float]:
        digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=9, key=self._key).digest()
        index = int.from_bytes(digest[:8], "little") % self._raw_dim
        sign = 1.0 if digest[8] % 2 == 0 else -1.0
        return index, sign

    def encode(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        vec = np.zeros(self._raw_dim, dtype=np.float64)
        if not tokens:
            return vec
        hit = np.zeros(self._raw_dim, dtype=bool)
        features: list[str] = list(tokens)
        for width in range(2, self._ngram + 1):
            features.extend(
                "\x1f".join(tokens[i : i + width]) for i in range(len(tokens) - width + 1)
            )
        for feature in features:
            index, sign = self._slot(feature)
            if hit[index]:
                vec[index] = max(vec[index], sign)
            else:
                vec[index] = sign
                hit[index] = True
        return vec


def encode_texts(encoder: TextEncoder, texts: tuple[str, ...] | list[str]) -> np.ndarray:
    """Stack per-text raw vectors into a (len(texts), raw_dim) matrix."""
    out = np.zeros((len(texts), encoder.raw_dim), dtype=np.float64)
    for i, text in enumerate(texts):
        out[i] = encoder.encode(text)
    return out


@dataclass
class DenseLayer:
    """Dimension-reduction parameters: weight (d, raw_dim) and bias (d,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("weight rows must match bias length")

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @property
    def raw_dim(self) -> int:
        return self.weight.shape[1]


def reduce_dim(weight: np.ndarray, bias: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Affine reduction ``relu(W e) + b`` applied row-wise.

    The bias sits outside the rectifier, so reduced vectors can go negative.
    """
    out, _ = reduce_dim_with_cache(weight, bias, raw)
    return out


def reduce_dim_with_cache(
    weight: np.ndarray, bias: np.ndarray, raw: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`reduce_dim` but also returns the pre-activation."""
    if weight.ndim != 2 or bias.ndim != 1 or weight.shape[0] != bias.shape[0]:
        raise ValueError("weight must be (d, raw_dim) and bias (d,)")
    single = raw.ndim == 1
    rows = raw[None, :] if single else raw
    if rows.shape[1] != weight.shape[1]:
        raise ValueError(f"raw dim {rows.shape[1]} does not match weight {weight.shape}")
    pre = rows @ weight.T
    out = np.maximum(pre, 0.0) + bias
    if single:
        return out[0], pre[0]
    return out, pre


def content_embeddings(
    encoder: TextEncoder, layer: DenseLayer, ds: "SchoolDataset"
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Reduced content vectors for every catalog course and activity.

    Keys are dense catalog indices.  Given identical encoder and layer
    parameters the course map is identical at every school, since the catalog
    is shared.
    """
    course_map: dict[int, np.ndarray] = {}
    activity_map: dict[int, np.ndarray] = {}
    if ds.catalog.n_courses:
        reduced = reduce_dim(layer.weight, layer.bias, encode_texts(encoder, ds.catalog.course_texts))
        course_map = {i: reduced[i] for i in range(ds.catalog.n_courses)}
    if ds.catalog.n_activities:
        reduced = reduce_dim(layer.weight, layer.bias, encode_texts(encoder, ds.catalog.activity_texts))
        activity_map = {i: reduced[i] for i in range(ds.catalog.n_activities)}
    return course_map, activity_map
