"""Stage schedule derived from the duration statistics of speech.

Phonemes last roughly 50 to 200 ms and words, which rarely contain more
than five phonemes, 250 to 1000 ms. Dividing those durations by the
feature hop length gives the attention window (in tokens) for each stage
and the merging scale between stages:

    frame stage window   = min phoneme duration / hop1
    merge scale M1       = min phoneme duration / hop1
    phoneme stage window = 2 * max phoneme duration / hop2
    merge scale M2       = min word duration / hop2
    word stage window    = 2 * max word duration / hop3
    merge scale M3       = max word duration / hop3

where hop2 = M1 * hop1 and hop3 = M2 * hop2. The utterance stage always
uses its own input length as the window, so it is not stored here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

DEFAULT_HOP1_MS = 10.0


@dataclass(frozen=True)
class DurationStats:
    """Duration bounds (milliseconds) for phonemes and words."""

    phoneme_min_ms: float = 50.0
    phoneme_max_ms: float = 200.0
    word_min_ms: float = 250.0
    word_max_ms: float = 1000.0

    def __post_init__(self):
        if not (0 < self.phoneme_min_ms <= self.phoneme_max_ms):
            raise ValueError("phoneme durations must satisfy 0 < min <= max")
        if not (0 < self.word_min_ms <= self.word_max_ms):
            raise ValueError("word durations must satisfy 0 < min <= max")


@dataclass(frozen=True)
class StageSchedule:
    """Per-stage window sizes, merge scales and effective hop lengths.

    ``window_tokens`` holds the frame/phoneme/word stage windows; the
    utterance stage uses its input length. ``hop_ms`` holds the hop at
    each of the first three stages and obeys hop_{k+1} = M_k * hop_k.
    """

    hop_ms: tuple[float, float, float]
    window_tokens: tuple[int, int, int]
    merge_scales: tuple[int, int, int]

    def __post_init__(self):
        if any(h <= 0 for h in self.hop_ms):
            raise ValueError("all hop lengths must be positive")
        if any(w < 1 for w in self.window_tokens):
            raise ValueError("all window sizes must be >= 1")
        if any(m < 1 for m in self.merge_scales):
            raise ValueError("all merge scales must be >= 1")
        h1, h2, h3 = self.hop_ms
        m1, m2, _ = self.merge_scales
        if not math.isclose(h2, m1 * h1, rel_tol=1e-9):
            raise ValueError(f"hop2={h2} must equal M1*hop1={m1 * h1}")
        if not math.isclose(h3, m2 * h2, rel_tol=1e-9):
            raise ValueError(f"hop3={h3} must equal M2*hop2={m2 * h2}")


def round_div(duration_ms: float, hop_ms: float) -> int:
    """Token count covering a duration: ceiling of the quotient, floored at 1."""
    if hop_ms <= 0:
        raise ValueError(f"hop length must be positive, got {hop_ms}")
    return max(1, math.ceil(duration_ms / hop_ms))


def derive_schedule(
    hop1_ms: float = DEFAULT_HOP1_MS, stats: DurationStats | None = None
) -> StageSchedule:
    """Derive the stage schedule for a raw feature hop of ``hop1_ms``.

    With the default 10 ms hop this gives windows (5, 8, 8), merge scales
    (5, 5, 4) and hops (10, 50, 250) ms.
    """
    if hop1_ms <= 0:
        raise ValueError(f"hop1_ms must be positive, got {hop1_ms}")
    stats = stats or DurationStats()

    tw_f = round_div(stats.phoneme_min_ms, hop1_ms)
    m1 = round_div(stats.phoneme_min_ms, hop1_ms)
    hop2 = m1 * hop1_ms
    tw_p = round_div(2 * stats.phoneme_max_ms, hop2)
    m2 = round_div(stats.word_min_ms, hop2)
    hop3 = m2 * hop2
    tw_w = round_div(2 * stats.word_max_ms, hop3)
    m3 = round_div(stats.word_max_ms, hop3)

    return StageSchedule(
        hop_ms=(hop1_ms, hop2, hop3),
        window_tokens=(tw_f, tw_p, tw_w),
        merge_scales=(m1, m2, m3),
    )


def token_chain(t_input: int, schedule: StageSchedule) -> list[int]:
    """Token count entering each of the four stages for a ``t_input``-long input.

    Each merge divides the count by its scale, rounding up (a final
    partial group still produces one merged token).
    """
    if t_input < 1:
        raise ValueError(f"t_input must be >= 1, got {t_input}")
    chain = [t_input]
    for m in schedule.merge_scales:
        chain.append(-(-chain[-1] // m))
    return chain


def format_schedule(schedule: StageSchedule) -> str:
    """Render a schedule as tab-separated ``key<TAB>value`` lines."""
    tw_f, tw_p, tw_w = schedule.window_tokens
    m1, m2, m3 = schedule.merge_scales
    h1, h2, h3 = schedule.hop_ms
    rows = [
        ("tw_f", tw_f),
        ("tw_p", tw_p),
        ("tw_w", tw_w),
        ("m1", m1),
        ("m2", m2),
        ("m3", m3),
        ("hop1_ms", f"{h1:g}"),
        ("hop2_ms", f"{h2:g}"),
        ("hop3_ms", f"{h3:g}"),
    ]
    return "\n".join(f"{k}\t{v}" for k, v in rows)
