"""Retrieval and captioning evaluation."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import COUNT_WORDS, PLURALS, ImageTextPair
from .decoding import caption_image
from .metrics import cider, corpus_bleu, rouge_l
from .model import BitaModel
from .objectives import Pooling, similarity_matrix
from .vocab import Vocabulary, normalize_words

__all__ = [
    "retrieval_top1",
    "object_word_recall",
    "evaluate_captions",
    "format_report",
]


def retrieval_top1(model: BitaModel, vocab: Vocabulary, dataset: Sequence[ImageTextPair],
                   pooling: Pooling = Pooling.MAX, caption_index: int = 0,
                   chunk: int = 64) -> float:
    """Fraction of images whose best-scoring caption (over the whole set) is their own."""
    text_len = model.config.max_text_len
    with ad.no_grad():
        z = np.concatenate([
            model.visual_prompts(np.stack([p.image for p in dataset[i:i + chunk]])).data
            for i in range(0, len(dataset), chunk)
        ])
        ids = np.array([vocab.text_branch_ids(p.captions[caption_index], text_len) for p in dataset])
        cls = np.concatenate([
            model.text_features(ids[i:i + chunk]).data[:, 0] for i in range(0, len(dataset), chunk)
        ])
        sim = similarity_matrix(ad.Tensor(z), ad.Tensor(cls), pooling).data
    return float(np.mean(np.argmax(sim, axis=1) == np.arange(len(dataset))))


def object_word_recall(caption: str, pair: ImageTextPair) -> float:
    """Share of the scene's ground-truth content words present in ``caption``.

    Colour and shape words count when present anywhere; a count word only
    counts when it directly precedes its group's colour, so the article in a
    template such as "a picture showing" earns nothing.
    """
    if pair.scene is None:
        raise ValueError(f"pair {pair.id!r} has no ground-truth scene")
    words = normalize_words(caption)
    present = set(words)
    bigrams = set(zip(words, words[1:]))
    hits = 0
    for count, color, shape in pair.scene.groups:
        plural = shape if count == 1 else PLURALS[shape]
        hits += (COUNT_WORDS[count], color) in bigrams
        hits += color in present
        hits += plural in present
    return hits / (3 * len(pair.scene.groups))


def evaluate_captions(model: BitaModel, vocab: Vocabulary, dataset: Sequence[ImageTextPair],
                      beam_width: int = 5, max_len: int = 22) -> dict:
    hyps, refs, recalls = [], [], []
    for pair in dataset:
        best = caption_image(model, pair.image, vocab, beam_width, max_len)[0]
        hyps.append(best.text)
        refs.append(pair.captions)
        if pair.scene is not None:
            recalls.append(object_word_recall(best.text, pair))
    report = {f"bleu{n}": corpus_bleu(hyps, refs, n) for n in range(1, 5)}
    report["rouge_l"] = float(np.mean([rouge_l(h, r) for h, r in zip(hyps, refs)]))
    report["cider"] = cider(hyps, refs)[1]
    report["n_images"] = len(dataset)
    extras = {"captions": hyps}
    if recalls:
        extras["object_recall"] = float(np.mean(recalls))
    return {"metrics": report, **extras}


def format_report(metrics: dict) -> str:
    """Stable JSON text: fixed key order, 4-decimal floats."""
    keys = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider")
    body = ", ".join(f'"{k}": {metrics[k]:.4f}' for k in keys)
    return "{" + body + f', "n_images": {int(metrics["n_images"])}' + "}\n"
