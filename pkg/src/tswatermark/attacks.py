"""Watermark-removal attacks.

``copy_paste`` dilutes a watermarked text inside human text, either as one
block or as three order-preserving segments.  ``corrupt`` stands in for a
paraphrase model: each position is, with probability ``rate``, resampled
from the language model given the (possibly already corrupted) previous
token.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError
from .lm import Origin, SyntheticLM, TokenSeq


def split_near_equal(n: int, k: int) -> list[int]:
    """Lengths of ``k`` contiguous parts of ``n`` items, longest first, differing by at most one."""
    base, extra = divmod(n, k)
    return [base + 1 if i < extra else base for i in range(k)]


def copy_paste(watermarked: TokenSeq, human: TokenSeq, k: int, attack_seed: int) -> TokenSeq:
    """Insert the watermarked text into ``human`` as ``k`` segments.

    Insertion points are distinct slots of the human text, so segments
    never touch and keep their original order.  ``meta["segments"]`` lists
    ``[start, length]`` of each watermarked segment in the output.
    """
    if k not in (1, 3):
        raise InputError(f"k must be 1 or 3, got {k}")
    wm, hu = list(watermarked.tokens), list(human.tokens)
    if len(hu) < len(wm):
        raise InputError("human text must be at least as long as the watermarked text")
    if len(wm) < k:
        raise InputError("watermarked text is shorter than the number of segments")
    rng = np.random.default_rng([int(attack_seed), k, 0xC0B])
    slots = np.sort(rng.choice(len(hu) + 1, size=k, replace=False))
    lengths = split_near_equal(len(wm), k)

    out, segments, pos, cursor = [], [], 0, 0
    for slot, n in zip(slots, lengths):
        out.extend(hu[cursor:slot])
        segments.append([len(out), n])
        out.extend(wm[pos:pos + n])
        pos += n
        cursor = int(slot)
    out.extend(hu[cursor:])
    meta = {"attack": "copy_paste", "k": k, "attack_seed": int(attack_seed), "segments": segments}
    return TokenSeq(tuple(out), Origin.ATTACKED, watermarked.seed, meta)


def corrupt(seq: TokenSeq, rate: float, attack_seed: int, model: SyntheticLM,
            prev_token: int | None = None) -> TokenSeq:
    """Resample each position with probability ``rate``.

    ``prev_token`` is the context of the first position (for example the
    last prompt token); without it a replaced first token is drawn
    uniformly.  ``meta["replaced"]`` counts positions chosen for
    replacement, some of which may redraw the original token.
    """
    if not 0.0 <= rate <= 1.0:
        raise InputError("rate must lie in [0, 1]")
    toks = model.check_tokens(seq.tokens).copy()
    V = model.vocab_size
    rng = np.random.default_rng([int(attack_seed), 0xC0DD])
    hit = rng.random(toks.size) < rate
    draws = rng.random(toks.size)
    for t in np.flatnonzero(hit):
        prev = toks[t - 1] if t > 0 else prev_token
        if prev is None:
            toks[t] = min(int(draws[t] * V), V - 1)
        else:
            row = np.cumsum(model.context_table[int(prev)])
            toks[t] = min(int(np.searchsorted(row, draws[t] * row[-1], side="right")), V - 1)
    meta = {"attack": "corrupt", "rate": float(rate), "attack_seed": int(attack_seed),
            "replaced": int(hit.sum())}
    return TokenSeq(tuple(int(x) for x in toks), Origin.ATTACKED, seq.seed, meta)
