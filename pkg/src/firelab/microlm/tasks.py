"""Synthetic sequence tasks where positional information is needed.

Token ids: 0 = separator, 1 = padding, 2..vocab-1 = content.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..errors import InvalidParameter

SEP = 0
PAD = 1
TASKS = ("copy", "shifted_recall")


@dataclass
class TaskSample:
    tokens: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        if self.tokens.shape != self.loss_mask.shape:
            raise InvalidParameter("tokens and loss_mask must have equal length")


def _check_vocab(vocab):
    if vocab < 3:
        raise InvalidParameter("vocab must be >= 3 (separator, padding and at least one content token)")


def _make(content, task, echo_len=None):
    k = len(content)
    if task == "copy":
        echo = content
    elif task == "shifted_recall":
        echo = np.roll(content, -1)
    else:
        raise InvalidParameter(f"unknown task {task!r}")
    echo = echo[: k if echo_len is None else echo_len]
    tokens = np.concatenate([content, [SEP], echo]).astype(np.int64)
    mask = np.zeros(tokens.shape[0], dtype=bool)
    mask[k + 1 :] = True
    return TaskSample(tokens, mask)


def generate_copy_task(k_min, k_max, vocab, seed, task="copy") -> Iterator[TaskSample]:
    """Endless stream of ``[t_1..t_k, SEP, echo]`` samples, k uniform in [k_min, k_max].

    The echo is the content itself for ``copy`` and the content rotated left
    by one for ``shifted_recall``.  Only echo positions are supervised.
    """
    _check_vocab(vocab)
    if not 1 <= k_min <= k_max:
        raise InvalidParameter("need 1 <= k_min <= k_max")
    rng = np.random.default_rng(seed)
    while True:
        k = int(rng.integers(k_min, k_max + 1))
        yield _make(rng.integers(2, vocab, size=k), task)


def min_length(task="copy"):
    return 3


def sample_of_length(length, vocab, rng, task="copy") -> TaskSample:
    """A sample of exactly ``length`` tokens with k = length // 2 content tokens.

    Odd lengths hold the full echo; even lengths stop the echo one token
    early.  Under teacher forcing the supervised predictions are the same
    ones a full sample would make, so no padding is needed.
    """
    _check_vocab(vocab)
    if length < min_length(task):
        raise InvalidParameter(f"length {length} is below the minimum task size {min_length(task)}")
    k = length // 2
    return _make(rng.integers(2, vocab, size=k), task, echo_len=length - k - 1)


def collate(samples):
    """Right-pad a list of samples into (tokens, loss_mask) arrays."""
    n = max(s.tokens.shape[0] for s in samples)
    tokens = np.full((len(samples), n), PAD, dtype=np.int64)
    mask = np.zeros((len(samples), n), dtype=bool)
    for b, s in enumerate(samples):
        tokens[b, : s.tokens.shape[0]] = s.tokens
        mask[b, : s.tokens.shape[0]] = s.loss_mask
    return tokens, mask


def train_k_range(train_len):
    """Content lengths whose samples fit in ``train_len`` tokens."""
    return 1, max(1, (train_len - 1) // 2)
