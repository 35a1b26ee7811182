"""CTC loss (log-space forward recursion on the tape), oracle, and decoding."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import (
    NumericError,
    Tensor,
    add,
    concat,
    gather_cols,
    logaddexp,
    reshape,
    slice_,
)

log = logging.getLogger(__name__)

BLANK_TOKEN = "<blank>"

# enumeration is vocab**frames; refuse anything bigger
BRUTE_FORCE_MAX_VOCAB = 6
BRUTE_FORCE_MAX_FRAMES = 8


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory with the CTC blank at index 0.

    Language codes and linguistic tokens are disjoint; the blank is never a
    target symbol.
    """

    tokens: tuple
    language_codes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        if not self.tokens or self.tokens[0] != BLANK_TOKEN:
            raise ValueError(f"vocabulary must start with {BLANK_TOKEN!r}")
        codes = set(self.language_codes)
        if BLANK_TOKEN in codes:
            raise ValueError("blank cannot be a language code")
        if not codes <= set(self.tokens):
            raise ValueError("language codes must be vocabulary tokens")

    @classmethod
    def build(cls, language_codes, linguistic_tokens):
        overlap = set(language_codes) & set(linguistic_tokens)
        if overlap:
            raise ValueError(f"codes overlap linguistic tokens: {sorted(overlap)}")
        return cls(
            tokens=(BLANK_TOKEN, *language_codes, *linguistic_tokens),
            language_codes=tuple(language_codes),
        )

    @property
    def blank_id(self):
        return 0

    def __len__(self):
        return len(self.tokens)

    @property
    def _ids(self):
        return {tok: i for i, tok in enumerate(self.tokens)}

    def encode(self, tokens):
        ids = self._ids
        try:
            return [ids[t] for t in tokens]
        except KeyError as exc:
            raise ValueError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def is_language_code(self, token_id):
        return self.tokens[token_id] in set(self.language_codes)

    def language_code_ids(self):
        ids = self._ids
        return [ids[c] for c in self.language_codes]


def min_frames(target):
    """Fewest output frames on which `target` has any CTC alignment."""
    target = list(target)
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + repeats


def _as_log_probs(log_probs):
    lp = log_probs if isinstance(log_probs, Tensor) else Tensor(log_probs)
    if lp.ndim != 2:
        raise ValueError(f"expected [frames x vocab] log-probs, got {lp.shape}")
    return lp


def _check_normalized(data, where):
    if not np.all(np.isfinite(np.max(data, axis=1))):
        raise NumericError(f"{where}: non-finite log-probabilities")
    m = np.max(data, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(data - m), axis=1))
    worst = np.max(np.abs(lse)) if lse.size else 0.0
    if worst > 1e-6:
        raise ValueError(
            f"{where}: rows are not normalized log-distributions "
            f"(max |logsumexp| = {worst:.3g})"
        )


def _check_target(target, vocab_size, blank):
    target = [int(y) for y in target]
    for y in target:
        if y == blank:
            raise ValueError("target contains the blank symbol")
        if not 0 <= y < vocab_size:
            raise ValueError(f"target id {y} outside vocabulary of {vocab_size}")
    return target


def ctc_loss(log_probs, target, blank=0):
    """Negative log probability of `target` under the CTC alignment model.

    Runs the standard log-space forward recursion over the blank-interleaved
    target; differentiable through the tape. An unachievable target (too few
    frames) yields +inf rather than an error.
    """
    lp = _as_log_probs(log_probs)
    _check_normalized(lp.data, "ctc_loss")
    frames = lp.shape[0]
    if frames < 1:
        raise ValueError("ctc_loss: need at least one frame")
    target = _check_target(target, lp.shape[1], blank)

    needed = min_frames(target)
    if frames < needed:
        log.debug(
            "unachievable target: %d frames < %d required for |Y|=%d",
            frames, needed, len(target),
        )
        return Tensor(np.float64(np.inf))

    ext = [blank]
    for y in target:
        ext.extend((y, blank))
    m = len(ext)

    init_mask = np.full(m, -np.inf)
    init_mask[0] = 0.0
    if m > 1:
        init_mask[1] = 0.0
    skip_mask = np.full(m, -np.inf)
    for i in range(2, m):
        if ext[i] != blank and ext[i] != ext[i - 2]:
            skip_mask[i] = 0.0
    skip_const = Tensor(skip_mask)
    pad1 = Tensor(np.full(1, -np.inf))
    pad2 = Tensor(np.full(2, -np.inf))

    emit = gather_cols(lp, ext)
    alpha = add(slice_(emit, 0), Tensor(init_mask))
    for t in range(1, frames):
        from_prev = logaddexp(alpha, concat([pad1, slice_(alpha, slice(0, m - 1))]))
        if m > 2:
            skip = add(
                concat([pad2, slice_(alpha, slice(0, m - 2))]), skip_const
            )
            from_prev = logaddexp(from_prev, skip)
        alpha = add(from_prev, slice_(emit, t))

    if m == 1:
        total = slice_(alpha, slice(0, 1))
    else:
        total = logaddexp(
            slice_(alpha, slice(m - 1, m)), slice_(alpha, slice(m - 2, m - 1))
        )
    return reshape(total, ()) * -1.0


def ctc_brute_force(log_probs, target, blank=0):
    """Exact target probability by enumerating every alignment path.

    Reference oracle for `ctc_loss`: probability equals exp(-loss).
    """
    lp = _as_log_probs(log_probs)
    frames, vocab = lp.shape
    if vocab > BRUTE_FORCE_MAX_VOCAB or frames > BRUTE_FORCE_MAX_FRAMES:
        raise ValueError(
            f"brute force refused: {frames} frames x {vocab} tokens exceeds "
            f"{BRUTE_FORCE_MAX_FRAMES} x {BRUTE_FORCE_MAX_VOCAB}"
        )
    target = _check_target(target, vocab, blank)
    return kernels.ctc_path_sum(np.exp(lp.data), np.array(target, np.int64), blank)


def greedy_decode(log_probs, blank=0):
    """Best-path decoding: per-frame argmax, merge repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    # np.argmax breaks ties toward the lowest index
    ids = np.argmax(lp, axis=-1)
    return collapse_path(ids, blank)


def collapse_path(ids, blank=0):
    """Merge adjacent repeats, then remove blanks."""
    ids = np.asarray(ids)
    if ids.size == 0:
        return []
    keep = np.ones(ids.shape[0], dtype=bool)
    keep[1:] = ids[1:] != ids[:-1]
    merged = ids[keep]
    return [int(i) for i in merged if i != blank]
