"""Parameter and FLOPs accounting for both encoder variants.

Counting convention: one multiply-accumulate is one FLOP, and softmax is
omitted. Under that convention a full-attention block of length T and
width d costs

    T*d*3d              query/key/value projections
    2*T^2*d             scores plus weighted sum, summed over heads
    2*(ffn_hidden/d)*T*d^2   the two FFN linears

and a windowed block replaces T^2 by T*min(Tw, T). A merging block of
scale m and expansion r costs ceil(T/m)*d*(r*d).

Layer norms, residual adds, activations, positional encoding and the
classifier head are sub-0.5% at the published sizes; they appear in the
report as informational lines but are excluded from FLOPs totals.
Parameter totals, by contrast, cover every tensor the model allocates,
so they can be cross-checked exactly against an initialized model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ComparisonError
from .model import ModelConfig
from .schedule import StageSchedule, derive_schedule, token_chain

CONVENTION = "MAC=1 FLOP; softmax omitted"

STAGE_NAMES = ("frame_stage", "phoneme_stage", "word_stage", "utterance_stage")


@dataclass
class CostLine:
    name: str
    params: int = 0
    flops: int = 0
    params_counted: bool = True
    flops_counted: bool = True


@dataclass
class CostReport:
    """Per-section cost breakdown under the stated counting convention."""

    convention: str
    lines: list[CostLine] = field(default_factory=list)
    t_input: int | None = None

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.lines if l.params_counted)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.lines if l.flops_counted)

    def line(self, name: str) -> CostLine:
        for l in self.lines:
            if l.name == name:
                return l
        raise KeyError(name)

    def format(self, fmt: str = "table") -> str:
        if fmt == "tsv":
            return self._format_tsv()
        if fmt == "table":
            return self._format_table()
        raise ValueError(f"unknown format {fmt!r}; expected 'table' or 'tsv'")

    def _format_tsv(self) -> str:
        rows = [("convention", self.convention)]
        if self.t_input is not None:
            rows.append(("input_length", self.t_input))
        for l in self.lines:
            rows.append((f"params.{l.name}{'' if l.params_counted else '.info'}", l.params))
            if self.t_input is not None:
                rows.append((f"flops.{l.name}{'' if l.flops_counted else '.info'}", l.flops))
        rows.append(("total_params", self.total_params))
        if self.t_input is not None:
            rows.append(("total_flops", self.total_flops))
        return "\n".join(f"{k}\t{v}" for k, v in rows)

    def _format_table(self) -> str:
        show_flops = self.t_input is not None
        header = f"{'section':<28} {'params':>14}" + (f" {'flops':>16}" if show_flops else "")
        out = [f"convention: {self.convention}"]
        if show_flops:
            out.append(f"input length: {self.t_input}")
        out.append(header)
        for l in self.lines:
            mark = "" if (l.params_counted and l.flops_counted) else " (info)"
            row = f"{l.name + mark:<28} {l.params:>14}"
            if show_flops:
                row += f" {l.flops:>16}"
            out.append(row)
        total = f"{'total':<28} {self.total_params:>14}"
        if show_flops:
            total += f" {self.total_flops:>16}"
        out.append(total)
        human = f"total: {human_count(self.total_params)} params"
        if show_flops:
            human += f", {human_count(self.total_flops)} FLOPs"
        out.append(human)
        return "\n".join(out)


def human_count(n: int) -> str:
    """Render a count the way the published tables do (e.g. 2.28G, 16.72M)."""
    for unit, width in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if n >= width:
            return f"{n / width:.2f}{unit}"
    return str(n)


def _block_params(d: int, hidden: int) -> int:
    attn = 3 * d * d + 3 * d
    ffn = d * hidden + hidden + hidden * d + d
    norms = 4 * d
    return attn + ffn + norms


def _block_flops(t: int, d: int, hidden: int, window: int | None = None) -> int:
    proj = t * d * 3 * d
    span = t if window is None else min(window, t)
    attn = 2 * t * span * d
    ffn = t * d * hidden + t * hidden * d
    return proj + attn + ffn


def attention_term_flops(t: int, d: int, window: int | None = None) -> int:
    """Just the score/weighted-sum term: quadratic in T when unwindowed."""
    span = t if window is None else min(window, t)
    return 2 * t * span * d


def _block_extras_flops(t: int, d: int, hidden: int) -> int:
    # informational: two layer norms (~5 passes each), two residual adds, relu
    return 2 * 5 * t * d + 2 * t * d + t * hidden


def _head_line(config: ModelConfig, d_final: int, t_final: int | None) -> CostLine:
    params = d_final * config.num_classes + config.num_classes
    flops = 0
    if t_final is not None:
        flops = t_final * d_final + d_final * config.num_classes
    return CostLine(
        "classifier_head", params=params, flops=flops, flops_counted=False
    )


def _build_report(
    config: ModelConfig, t_input: int | None, schedule: StageSchedule | None
) -> CostReport:
    report = CostReport(convention=CONVENTION, t_input=t_input)
    widths = config.stage_widths

    if config.variant == "baseline":
        d = config.d_model
        hidden = config.ffn_hidden(d)
        n = config.blocks_per_stage[0]
        line = CostLine(f"encoder_blocks_x{n}", params=n * _block_params(d, hidden))
        extras = CostLine("norm_residual_relu", flops_counted=False, params_counted=True)
        pos = CostLine("positional_encoding", flops_counted=False)
        t_final = t_input
        if t_input is not None:
            line.flops = n * _block_flops(t_input, d, hidden)
            extras.flops = n * _block_extras_flops(t_input, d, hidden)
            pos.flops = t_input * d
        report.lines.append(line)
        report.lines.append(_head_line(config, d, t_final))
        report.lines.append(pos)
        report.lines.append(extras)
        return report

    if schedule is None:
        schedule = derive_schedule(config.hop1_ms)
    chain = token_chain(t_input, schedule) if t_input is not None else None

    extras_flops = 0
    for stage, n_blocks in enumerate(config.blocks_per_stage):
        d = widths[stage]
        hidden = config.ffn_hidden(d)
        line = CostLine(
            f"{STAGE_NAMES[stage]}_x{n_blocks}",
            params=n_blocks * _block_params(d, hidden),
        )
        if chain is not None:
            t = chain[stage]
            # The utterance stage attends over its whole input.
            window = schedule.window_tokens[stage] if stage < 3 else None
            line.flops = n_blocks * _block_flops(t, d, hidden, window)
            extras_flops += n_blocks * _block_extras_flops(t, d, hidden)
        report.lines.append(line)
        if stage < 3:
            d_out = widths[stage + 1]
            merge = CostLine(f"merge{stage + 1}", params=d * d_out + d_out)
            if chain is not None:
                merge.flops = chain[stage + 1] * d * d_out
                extras_flops += chain[stage] * d  # pooling adds, informational
            report.lines.append(merge)

    t_final = chain[3] if chain is not None else None
    report.lines.append(_head_line(config, widths[-1], t_final))
    pos = CostLine("positional_encoding", flops_counted=False)
    extras = CostLine("norm_residual_relu", flops_counted=False)
    if t_input is not None:
        pos.flops = t_input * config.d_model
        extras.flops = extras_flops
    report.lines.append(pos)
    report.lines.append(extras)
    return report


def count_params(config: ModelConfig) -> CostReport:
    """Exact parameter counts per section; totals match an initialized model."""
    return _build_report(config, None, None)


def count_flops(
    config: ModelConfig, t_input: int, schedule: StageSchedule | None = None
) -> CostReport:
    """FLOPs (and params) for one forward pass over a ``t_input``-token input."""
    if t_input < 1:
        raise ValueError(f"t_input must be >= 1, got {t_input}")
    return _build_report(config, t_input, schedule)


def compare(reference: CostReport, candidate: CostReport) -> float:
    """Candidate/reference FLOPs ratio; both must cover the same input length."""
    if reference.t_input is None or candidate.t_input is None:
        raise ComparisonError("both reports must carry FLOPs (an input length)")
    if reference.t_input != candidate.t_input:
        raise ComparisonError(
            f"input lengths differ: {reference.t_input} vs {candidate.t_input}"
        )
    return candidate.total_flops / reference.total_flops


def mean_flops_ratio(pairs) -> float:
    """Average compare() over (reference, candidate) pairs, e.g. one corpus."""
    ratios = [compare(ref, cand) for ref, cand in pairs]
    if not ratios:
        raise ComparisonError("no report pairs given")
    return sum(ratios) / len(ratios)
