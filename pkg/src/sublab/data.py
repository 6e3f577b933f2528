"""Synthetic sequence-to-sequence corpora.

Token ids: 0 = pad, 1 = bos, 2 = eos; payload tokens start at 3. Sequences
stored in a corpus are raw payload (no specials); batching and decoding add
the framing. All tasks are length-preserving maps of the source, so a pair
is determined by its source and split disjointness reduces to distinct
sources.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD, BOS, EOS = 0, 1, 2
FIRST_PAYLOAD = 3

TASKS = ("copy", "reverse", "sort", "toy_translate")

# sub-stream ids for deriving independent generators from one corpus seed
_STREAM_SEQUENCES = 0
_STREAM_BIJECTION = 1


@dataclass
class Corpus:
    """One split of a generated dataset."""

    task: str
    split: str
    pairs: list[tuple[list[int], list[int]]]
    vocab_size: int

    def sources(self) -> list[list[int]]:
        return [src for src, _ in self.pairs]

    def targets(self) -> list[list[int]]:
        return [tgt for _, tgt in self.pairs]


def swap_adjacent(tokens: list[int]) -> list[int]:
    """Swap tokens at positions p, p+1 for every p divisible by 3."""
    out = list(tokens)
    for p in range(0, len(out) - 1, 3):
        out[p], out[p + 1] = out[p + 1], out[p]
    return out


def toy_translate_target(src: list[int], bijection: dict[int, int]) -> list[int]:
    return swap_adjacent([bijection[t] for t in src])


def make_bijection(vocab_size: int, seed: int) -> dict[int, int]:
    """Seeded permutation of the payload alphabet."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _STREAM_BIJECTION])))
    payload = np.arange(FIRST_PAYLOAD, vocab_size)
    shuffled = payload.copy()
    rng.shuffle(shuffled)
    return {int(a): int(b) for a, b in zip(payload, shuffled)}


def _target_for(task: str, src: list[int], bijection: dict[int, int] | None) -> list[int]:
    if task == "copy":
        return list(src)
    if task == "reverse":
        return list(reversed(src))
    if task == "sort":
        return sorted(src)
    if task == "toy_translate":
        assert bijection is not None
        return toy_translate_target(src, bijection)
    raise ValueError(f"unknown task '{task}'")


def generate(
    task: str,
    n_pairs: int,
    seed: int,
    len_range: tuple[int, int] = (4, 14),
    vocab_size: int = 32,
    valid_size: int = 128,
    test_size: int = 128,
) -> dict[str, Corpus]:
    """Deterministic train/valid/test corpora with pairwise-disjoint pairs.

    ``n_pairs`` is the training-set size. Sources are drawn without
    replacement (rejection on the source tuple), so the three splits cannot
    share a pair.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task '{task}'; expected one of {TASKS}")
    lo, hi = len_range
    if not (1 <= lo <= hi):
        raise ValueError(f"invalid len_range {len_range}")
    if vocab_size <= FIRST_PAYLOAD:
        raise ValueError(f"vocab_size must exceed {FIRST_PAYLOAD}, got {vocab_size}")
    if n_pairs <= 0:
        raise ValueError("n_pairs must be positive")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _STREAM_SEQUENCES])))
    bijection = make_bijection(vocab_size, seed) if task == "toy_translate" else None

    total = n_pairs + valid_size + test_size
    seen: set[tuple[int, ...]] = set()
    sources: list[list[int]] = []
    attempts = 0
    cap = 200 * total
    while len(sources) < total:
        attempts += 1
        if attempts > cap:
            raise ValueError(
                f"could not draw {total} distinct sources from the configured space"
            )
        length = int(rng.integers(lo, hi + 1))
        src = rng.integers(FIRST_PAYLOAD, vocab_size, size=length)
        key = tuple(int(t) for t in src)
        if key in seen:
            continue
        seen.add(key)
        sources.append(list(key))

    pairs = [(src, _target_for(task, src, bijection)) for src in sources]
    splits = {
        "train": pairs[:n_pairs],
        "valid": pairs[n_pairs : n_pairs + valid_size],
        "test": pairs[n_pairs + valid_size :],
    }
    return {
        name: Corpus(task=task, split=name, pairs=split, vocab_size=vocab_size)
        for name, split in splits.items()
    }


def batch_arrays(pairs: list[tuple[list[int], list[int]]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad a list of pairs into model input arrays.

    Source rows are payload followed by eos; decoder input rows are bos
    followed by payload; decoder target rows are payload followed by eos.
    Everything is right-padded with the pad token.
    """
    if not pairs:
        raise ValueError("empty batch")
    src_len = max(len(src) for src, _ in pairs) + 1
    tgt_len = max(len(tgt) for _, tgt in pairs) + 1
    b = len(pairs)
    src = np.full((b, src_len), PAD, dtype=np.int64)
    tgt_in = np.full((b, tgt_len), PAD, dtype=np.int64)
    tgt_out = np.full((b, tgt_len), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        src[i, len(s)] = EOS
        tgt_in[i, 0] = BOS
        tgt_in[i, 1 : len(t) + 1] = t
        tgt_out[i, : len(t)] = t
        tgt_out[i, len(t)] = EOS
    return src, tgt_in, tgt_out


def export_pairs(corpus: Corpus) -> str:
    """One pair per line: space-separated source ids, a tab, target ids."""
    lines = []
    for src, tgt in corpus.pairs:
        lines.append(" ".join(str(t) for t in src) + "\t" + " ".join(str(t) for t in tgt))
    return "\n".join(lines) + "\n"


def parse_pairs(text: str) -> list[tuple[list[int], list[int]]]:
    pairs = []
    for line in text.splitlines():
        if not line.strip():
            continue
        src_part, tgt_part = line.split("\t")
        pairs.append(
            ([int(t) for t in src_part.split()], [int(t) for t in tgt_part.split()])
        )
    return pairs
