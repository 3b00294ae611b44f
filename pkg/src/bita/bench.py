"""Wall-clock comparison of the Fourier and self-attention token mixers."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import InteractiveFourierTransformer, ModelConfig
from .spectral import MixerKind, fourier_mix_array

__all__ = ["BenchRow", "bench_mixer", "time_text_branch", "subquadratic_ratio", "time_fourier_mix", "rows_to_csv"]


@dataclass
class BenchRow:
    seq_len: int
    mixer: str
    mean_us: float
    stddev_us: float
    params: int


def _branch_config(seq_len: int, hidden: int, mixer: MixerKind, num_layers: int,
                   heads: int) -> ModelConfig:
    return ModelConfig(hidden_dim=hidden, num_layers=num_layers, num_heads=heads,
                       max_text_len=seq_len, mixer=mixer, vocab_size=32)


def time_text_branch(seq_len: int, hidden: int, mixer, reps: int = 5, batch: int = 4,
                     num_layers: int = 4, heads: int = 4, seed: int = 0) -> tuple[np.ndarray, int]:
    """Per-iteration seconds (forward + backward) of the IFT text branch.

    Returns the ``reps`` timings (after one untimed warm-up iteration) and
    the branch's parameter count.
    """
    cfg = _branch_config(seq_len, hidden, MixerKind.parse(mixer), num_layers, heads)
    ift = InteractiveFourierTransformer(cfg)
    ids = np.random.default_rng(seed).integers(5, cfg.vocab_size, size=(batch, seq_len))
    params = [p for layer in ift.shared for p in layer.parameters()]
    times = []
    for i in range(reps + 1):
        for p in params:
            p.grad = None
        start = time.perf_counter()
        out = ift.text_branch(ids)
        ad.backward(ad.sum(out), inputs=params)
        elapsed = time.perf_counter() - start
        if i:
            times.append(elapsed)
    return np.array(times), sum(p.size for p in params)


def bench_mixer(seq_lens, hidden: int = 64, reps: int = 5, batch: int = 4,
                mixers=(MixerKind.FOURIER, MixerKind.SELF_ATTENTION)) -> list[BenchRow]:
    rows = []
    for s in seq_lens:
        for kind in mixers:
            kind = MixerKind.parse(kind)
            times, n_params = time_text_branch(s, hidden, kind, reps, batch)
            rows.append(BenchRow(s, kind.value, float(times.mean() * 1e6),
                                 float(times.std() * 1e6), n_params))
    return rows


def time_fourier_mix(seq_len: int, hidden: int = 64, reps: int = 5, batch: int = 4,
                     seed: int = 0) -> float:
    """Fastest of ``reps`` forward ``fourier_mix_array`` calls on ``[batch, seq, hidden]``.

    The minimum is the estimate least disturbed by other load on the machine.
    """
    x = np.random.default_rng(seed).standard_normal((batch, seq_len, hidden))
    fourier_mix_array(x)
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fourier_mix_array(x)
        times.append(time.perf_counter() - start)
    return float(np.min(times))


def subquadratic_ratio(hidden: int = 64, reps: int = 5, batch: int = 4,
                       short: int = 256, long: int = 1024) -> float:
    """time(long) / time(short) for the bare Fourier mixer; quadratic scaling gives 16."""
    return time_fourier_mix(long, hidden, reps, batch) / time_fourier_mix(short, hidden, reps, batch)


def rows_to_csv(rows: list[BenchRow]) -> str:
    lines = ["seq_len,mixer,mean_us,stddev_us,params"]
    lines += [f"{r.seq_len},{r.mixer},{r.mean_us:.1f},{r.stddev_us:.1f},{r.params}" for r in rows]
    return "\n".join(lines) + "\n"
