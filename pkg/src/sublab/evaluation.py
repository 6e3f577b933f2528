"""Decoding and corpus BLEU.

Greedy decoding is batched: the source batch is encoded once and the
decoder re-reads the growing prefix each step. Ties in the argmax resolve
to the smallest token id, output length is capped at 2*len(src)+8, and
nothing here consumes RNG, so decoding is a pure function of the weights.

BLEU is the standard corpus score: modified 1..4-gram precisions,
geometric mean, multiplied by the brevity penalty exp(1 - ref/cand) when
the candidate side is shorter. Orders n >= 2 with a raw match count of
zero are smoothed to (0+1)/(total+1); a zero unigram precision scores 0.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model as M
from .data import BOS, EOS, PAD
from .model import InterpolationSpec, MaskSpec, ModelConfig, Parameters


def length_cap(src_len: int) -> int:
    return 2 * src_len + 8


def _tie_break_argmax(row: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the smallest token id
    return int(np.argmax(row))


def greedy_decode(
    values: dict,
    config: ModelConfig,
    sources: list[list[int]],
    mask: MaskSpec = M.EMPTY_MASK,
) -> list[list[int]]:
    """Batched greedy decode of raw payload sources; returns payload outputs."""
    if not sources:
        return []
    b = len(sources)
    src_len = max(len(s) for s in sources) + 1
    src = np.full((b, src_len), PAD, dtype=np.int64)
    for i, s in enumerate(sources):
        src[i, : len(s)] = s
        src[i, len(s)] = EOS

    memory, src_bias = M.encode(values, config, src, mask=mask)
    caps = [length_cap(len(s)) for s in sources]
    prefix = np.full((b, 1), BOS, dtype=np.int64)
    outputs: list[list[int]] = [[] for _ in range(b)]
    finished = [False] * b

    for _ in range(max(caps)):
        logits = M.decode_logits(values, config, memory, src_bias, prefix, mask=mask)
        last = logits.data[:, -1, :]
        next_tokens = np.full(b, PAD, dtype=np.int64)
        for i in range(b):
            if finished[i]:
                continue
            tok = _tie_break_argmax(last[i])
            if tok == EOS or len(outputs[i]) >= caps[i]:
                finished[i] = True
                continue
            outputs[i].append(tok)
            next_tokens[i] = tok
        if all(finished):
            break
        prefix = np.concatenate([prefix, next_tokens[:, None]], axis=1)
    return outputs


def beam_decode(
    values: dict,
    config: ModelConfig,
    source: list[int],
    beam: int,
    mask: MaskSpec = M.EMPTY_MASK,
) -> list[int]:
    """Beam search for one sentence; beam=1 reduces to greedy."""
    if beam < 1:
        raise ValueError("beam width must be >= 1")
    src = np.array([source + [EOS]], dtype=np.int64)
    memory, src_bias = M.encode(values, config, src, mask=mask)
    cap = length_cap(len(source))

    # hypotheses: (score, tokens, finished); tie-break on the token sequence
    hyps: list[tuple[float, tuple, bool]] = [(0.0, (), False)]
    for _ in range(cap + 1):
        if all(done for _, _, done in hyps):
            break
        candidates: list[tuple[float, tuple, bool]] = []
        for score, tokens, done in hyps:
            if done or len(tokens) >= cap:
                candidates.append((score, tokens, True))
                continue
            prefix = np.array([[BOS, *tokens]], dtype=np.int64)
            logits = M.decode_logits(values, config, memory, src_bias, prefix, mask=mask)
            row = logits.data[0, -1, :]
            shifted = row - row.max()
            logprobs = shifted - math.log(np.exp(shifted).sum())
            # lexsort's last key is primary: best logprob first, ties to small ids
            order = np.lexsort((np.arange(row.size), -logprobs))[:beam]
            for tok in order:
                tok = int(tok)
                next_tokens = tokens if tok == EOS else tokens + (tok,)
                candidates.append((score + float(logprobs[tok]), next_tokens, tok == EOS))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        hyps = candidates[:beam]
    return list(hyps[0][1])


def decode(
    params: Parameters,
    sources: list[list[int]],
    mask: Optional[MaskSpec] = None,
    interp: Optional[InterpolationSpec] = None,
    beam: int = 1,
) -> list[list[int]]:
    """Decode a list of payload sources under optional mask/interpolation."""
    mask = mask if mask is not None else M.EMPTY_MASK
    mask.validate(params.config)
    values = M.interpolate_values(params, interp)
    if beam == 1:
        return greedy_decode(values, params.config, sources, mask=mask)
    return [beam_decode(values, params.config, s, beam, mask=mask) for s in sources]


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

MAX_ORDER = 4


def _ngrams(tokens: list[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: list[list[int]], references: list[list[int]]) -> float:
    """Corpus BLEU in [0, 100]."""
    if len(candidates) != len(references):
        raise ValueError("candidate and reference counts differ")
    if not candidates:
        raise ValueError("empty corpus")

    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            cand_grams = _ngrams(cand, n)
            if not cand_grams:
                continue
            ref_grams = _ngrams(ref, n)
            totals[n - 1] += sum(cand_grams.values())
            matches[n - 1] += sum(min(c, ref_grams[g]) for g, c in cand_grams.items())

    if cand_len == 0:
        return 0.0
    if matches[0] == 0:
        return 0.0

    log_sum = 0.0
    for n in range(1, MAX_ORDER + 1):
        m, t = matches[n - 1], totals[n - 1]
        if n >= 2 and m == 0:
            precision = (m + 1.0) / (t + 1.0)
        else:
            precision = m / t
        log_sum += math.log(precision)

    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * brevity * math.exp(log_sum / MAX_ORDER)


@dataclass
class EvalReport:
    bleu: float
    n_sentences: int
    mask: list = field(default_factory=list)
    interp: dict = field(default_factory=dict)
    checkpoint: str = ""

    def to_json(self) -> str:
        doc = {
            "bleu": self.bleu,
            "n_sentences": self.n_sentences,
            "mask": sorted(self.mask),
            "interp": {k: self.interp[k] for k in sorted(self.interp)},
            "checkpoint": self.checkpoint,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def evaluate(
    params: Parameters,
    pairs: list[tuple[list[int], list[int]]],
    mask: Optional[MaskSpec] = None,
    interp: Optional[InterpolationSpec] = None,
    beam: int = 1,
    checkpoint: str = "",
) -> EvalReport:
    """Decode the pair sources and score BLEU against the pair targets."""
    if not pairs:
        raise ValueError("empty evaluation set")
    hyps = decode(params, [src for src, _ in pairs], mask=mask, interp=interp, beam=beam)
    score = bleu(hyps, [tgt for _, tgt in pairs])
    return EvalReport(
        bleu=score,
        n_sentences=len(pairs),
        mask=[cid.key for cid in (mask.masked if mask else frozenset())],
        interp={cid.key: a for cid, a in (interp.alphas if interp else ())},
        checkpoint=checkpoint,
    )
