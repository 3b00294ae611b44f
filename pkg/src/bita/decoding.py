"""Beam-search decoding with length-normalised ranking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import BitaModel, build_prefix_causal_mask
from .vocab import BOS, EOS, Vocabulary

__all__ = ["Caption", "beam_search", "greedy_decode", "caption_image", "lm_scorer"]

# Maps a batch of partial sequences (each starting with BOS) to next-token
# log-probabilities, shape [n_sequences, vocab].
Scorer = Callable[[Sequence[Sequence[int]]], np.ndarray]


@dataclass
class Caption:
    token_ids: list[int]
    score: float
    log_prob: float = 0.0
    text: str = ""
    finished: bool = field(default=False, repr=False)


def _normalised(log_prob: float, n_tokens: int) -> float:
    return log_prob / max(n_tokens, 1)


def beam_search(score_fn: Scorer, beam_width: int = 5, max_len: int = 22,
                bos_id: int = BOS, eos_id: int | None = EOS) -> list[Caption]:
    """Length-terminated beam search.

    Hypotheses are ranked by total log-probability divided by the number of
    generated tokens (an emitted EOS counts).  A hypothesis ends when it
    emits ``eos_id`` or reaches ``max_len`` generated tokens.  Returns at
    most ``beam_width`` captions, best first; ``token_ids`` exclude BOS and
    include the EOS when one was emitted.
    """
    if beam_width < 1 or max_len < 1:
        raise ValueError("beam_width and max_len must be at least 1")
    alive: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[Caption] = []
    for step in range(max_len):
        logp = np.asarray(score_fn([[bos_id] + seq for seq, _ in alive]), dtype=np.float64)
        candidates = []
        for b, (seq, total) in enumerate(alive):
            for tok in range(logp.shape[1]):
                new_total = total + float(logp[b, tok])
                candidates.append((_normalised(new_total, len(seq) + 1), b, tok, new_total))
        # stable: ties resolve toward earlier beams and smaller token ids
        candidates.sort(key=lambda c: -c[0])
        next_alive = []
        for norm, b, tok, new_total in candidates[: beam_width]:
            seq = alive[b][0] + [tok]
            if eos_id is not None and tok == eos_id:
                finished.append(Caption(seq, norm, new_total, finished=True))
            elif step == max_len - 1:
                finished.append(Caption(seq, norm, new_total))
            else:
                next_alive.append((seq, new_total))
        alive = next_alive
        if not alive:
            break
    finished.sort(key=lambda c: -c.score)
    return finished[:beam_width]


def greedy_decode(score_fn: Scorer, max_len: int = 22, bos_id: int = BOS,
                  eos_id: int | None = EOS) -> list[int]:
    seq: list[int] = []
    for _ in range(max_len):
        tok = int(np.argmax(score_fn([[bos_id] + seq])[0]))
        seq.append(tok)
        if eos_id is not None and tok == eos_id:
            break
    return seq


def lm_scorer(model: BitaModel, image) -> Scorer:
    """Next-token log-probabilities from the frozen LM under a fixed visual prefix."""
    with ad.no_grad():
        prefix = model.project_to_lm(model.visual_prompts(image)).data

    def score(seqs):
        with ad.no_grad():
            ids = np.asarray(seqs, dtype=np.int64)
            n, t = ids.shape
            mask = build_prefix_causal_mask(prefix.shape[0], t)
            batch_prefix = Tensor(np.broadcast_to(prefix, (n,) + prefix.shape))
            logits = model.lm_forward(batch_prefix, ids, mask).data[:, -1, :]
            return ad.log_softmax(Tensor(logits)).data

    return score


def caption_image(model: BitaModel, image, vocab: Vocabulary, beam_width: int = 5,
                  max_len: int = 22) -> list[Caption]:
    captions = beam_search(lm_scorer(model, image), beam_width, max_len)
    for c in captions:
        c.text = vocab.decode(c.token_ids)
    return captions
