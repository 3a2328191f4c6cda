"""Encoder assembly: blocks, merging blocks, stages, and the forward pass.

Two variants share all building blocks. The baseline is a flat stack of
N standard pre-norm transformer blocks. The hierarchical variant runs
four stages (frame, phoneme, word, utterance) of windowed-attention
blocks, with a merging block between consecutive stages that pools M
consecutive tokens and applies a linear layer that may expand the width
by an integer factor r.

Weights are plain float64 arrays created deterministically from a seed,
so identical (config, seed) pairs always produce bit-identical models.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernel
from .attention import AttentionParams, WindowSpec, msa, speech_msa
from .errors import ConfigError, ShapeError
from .schedule import StageSchedule, derive_schedule

VARIANTS = ("baseline", "speechformer")

DEFAULT_BASELINE_BLOCKS = (12,)
DEFAULT_STAGE_BLOCKS = (2, 2, 4, 4)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description for either variant."""

    variant: str
    d_model: int
    num_heads: int = 8
    blocks_per_stage: tuple[int, ...] = ()
    expand_factors: tuple[int, int, int] = (1, 1, 1)
    num_classes: int = 4
    hop1_ms: float = 10.0
    scale_mode: str = "sqrt_dh"
    ffn_ratio: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected {VARIANTS}")
        if not self.blocks_per_stage:
            default = (
                DEFAULT_BASELINE_BLOCKS
                if self.variant == "baseline"
                else DEFAULT_STAGE_BLOCKS
            )
            object.__setattr__(self, "blocks_per_stage", default)
        expected = 1 if self.variant == "baseline" else 4
        if len(self.blocks_per_stage) != expected:
            raise ConfigError(
                f"{self.variant} needs {expected} block count(s), "
                f"got {self.blocks_per_stage}"
            )
        if any(n < 1 for n in self.blocks_per_stage):
            raise ConfigError("block counts must be >= 1")
        if self.d_model < 1:
            raise ConfigError("d_model must be >= 1")
        if self.num_heads < 1 or self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} must be divisible by num_heads={self.num_heads}"
            )
        if len(self.expand_factors) != 3 or any(r < 1 for r in self.expand_factors):
            raise ConfigError("expand_factors must be three integers >= 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.hop1_ms <= 0:
            raise ConfigError("hop1_ms must be positive")
        if self.ffn_ratio <= 0:
            raise ConfigError("ffn_ratio must be positive")
        if self.scale_mode not in ("sqrt_dh", "dh"):
            raise ConfigError(f"unknown scale_mode {self.scale_mode!r}")

    @classmethod
    def baseline(cls, d_model: int, **kw) -> "ModelConfig":
        return cls(variant="baseline", d_model=d_model, **kw)

    @classmethod
    def speechformer_s(cls, d_model: int, **kw) -> "ModelConfig":
        return cls(
            variant="speechformer",
            d_model=d_model,
            blocks_per_stage=DEFAULT_STAGE_BLOCKS,
            expand_factors=(1, 1, 1),
            **kw,
        )

    @classmethod
    def speechformer_b(cls, d_model: int, **kw) -> "ModelConfig":
        return cls(
            variant="speechformer",
            d_model=d_model,
            blocks_per_stage=DEFAULT_STAGE_BLOCKS,
            expand_factors=(1, 1, 2),
            **kw,
        )

    @property
    def stage_widths(self) -> tuple[int, ...]:
        """Model width entering each stage (baseline: a single stage)."""
        if self.variant == "baseline":
            return (self.d_model,)
        widths = [self.d_model]
        for r in self.expand_factors:
            widths.append(widths[-1] * r)
        return tuple(widths)

    def ffn_hidden(self, width: int) -> int:
        return max(1, round(self.ffn_ratio * width))

    def num_blocks(self) -> int:
        return sum(self.blocks_per_stage)


@dataclass
class BlockWeights:
    """One pre-norm encoder block: attention sub-layer plus FFN sub-layer."""

    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    attn: AttentionParams
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray


@dataclass
class MergeWeights:
    w: np.ndarray
    b: np.ndarray


@dataclass
class ModelWeights:
    blocks: list[BlockWeights] = field(default_factory=list)
    merges: list[MergeWeights] = field(default_factory=list)
    head_w: np.ndarray = None
    head_b: np.ndarray = None


# Canonical tensor naming, shared by checkpoints and gradient checks.
BLOCK_FIELDS = (
    "ln1_gain",
    "ln1_bias",
    "wq",
    "bq",
    "wk",
    "bk",
    "wv",
    "bv",
    "ln2_gain",
    "ln2_bias",
    "ffn_w1",
    "ffn_b1",
    "ffn_w2",
    "ffn_b2",
)
_ATTN_FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv")


def block_key(index: int, fieldname: str) -> str:
    return f"block{index:02d}.{fieldname}"


def merge_key(index: int, fieldname: str) -> str:
    return f"merge{index}.{fieldname}"


HEAD_W_KEY = "head.w"
HEAD_B_KEY = "head.b"


def tensor_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) for every tensor, in forward traversal order.

    kind is 'weight' (random init), 'bias' (zeros) or 'gain' (ones).
    """
    layout = []
    widths = config.stage_widths
    index = 0
    for stage, n_blocks in enumerate(config.blocks_per_stage):
        d = widths[stage]
        hidden = config.ffn_hidden(d)
        shapes = {
            "ln1_gain": ((d,), "gain"),
            "ln1_bias": ((d,), "bias"),
            "wq": ((d, d), "weight"),
            "bq": ((d,), "bias"),
            "wk": ((d, d), "weight"),
            "bk": ((d,), "bias"),
            "wv": ((d, d), "weight"),
            "bv": ((d,), "bias"),
            "ln2_gain": ((d,), "gain"),
            "ln2_bias": ((d,), "bias"),
            "ffn_w1": ((d, hidden), "weight"),
            "ffn_b1": ((hidden,), "bias"),
            "ffn_w2": ((hidden, d), "weight"),
            "ffn_b2": ((d,), "bias"),
        }
        for _ in range(n_blocks):
            for fieldname in BLOCK_FIELDS:
                shape, kind = shapes[fieldname]
                layout.append((block_key(index, fieldname), shape, kind))
            index += 1
        if config.variant == "speechformer" and stage < 3:
            d_out = widths[stage + 1]
            layout.append((merge_key(stage, "w"), (d, d_out), "weight"))
            layout.append((merge_key(stage, "b"), (d_out,), "bias"))
    d_final = widths[-1]
    layout.append((HEAD_W_KEY, (d_final, config.num_classes), "weight"))
    layout.append((HEAD_B_KEY, (config.num_classes,), "bias"))
    return layout


def init_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Deterministic weight init: uniform(+-1/sqrt(fan_in)) for weights,
    zeros for biases, ones for layer-norm gains."""
    rng = np.random.default_rng(seed)
    named = {}
    for name, shape, kind in tensor_layout(config):
        if kind == "weight":
            lim = 1.0 / np.sqrt(shape[0])
            named[name] = rng.uniform(-lim, lim, size=shape)
        elif kind == "gain":
            named[name] = np.ones(shape)
        else:
            named[name] = np.zeros(shape)
    return weights_from_named(config, named)


def named_tensors(config: ModelConfig, weights: ModelWeights) -> dict[str, np.ndarray]:
    """Flatten weights into an ordered name -> array mapping."""
    out: dict[str, np.ndarray] = {}
    index = 0
    merge = 0
    for stage, n_blocks in enumerate(config.blocks_per_stage):
        for _ in range(n_blocks):
            bw = weights.blocks[index]
            for fieldname in BLOCK_FIELDS:
                src = bw.attn if fieldname in _ATTN_FIELDS else bw
                out[block_key(index, fieldname)] = getattr(src, fieldname)
            index += 1
        if config.variant == "speechformer" and stage < 3:
            out[merge_key(merge, "w")] = weights.merges[merge].w
            out[merge_key(merge, "b")] = weights.merges[merge].b
            merge += 1
    out[HEAD_W_KEY] = weights.head_w
    out[HEAD_B_KEY] = weights.head_b
    return out


def weights_from_named(
    config: ModelConfig, named: dict[str, np.ndarray]
) -> ModelWeights:
    """Rebuild structured weights from a named mapping, validating shapes."""
    layout = tensor_layout(config)
    expected_names = [name for name, _, _ in layout]
    missing = [n for n in expected_names if n not in named]
    if missing:
        raise ConfigError(f"missing tensors for config: {missing[:4]}...")
    extra = [n for n in named if n not in set(expected_names)]
    if extra:
        raise ConfigError(f"unexpected tensors for config: {extra[:4]}...")
    arrays = {}
    for name, shape, _ in layout:
        a = np.asarray(named[name], dtype=np.float64)
        if a.size != int(np.prod(shape)):
            raise ShapeError(f"tensor {name}: expected shape {shape}, got {a.shape}")
        arrays[name] = a.reshape(shape)

    weights = ModelWeights()
    index = 0
    for stage, n_blocks in enumerate(config.blocks_per_stage):
        for _ in range(n_blocks):
            get = lambda f: arrays[block_key(index, f)]
            attn = AttentionParams(
                wq=get("wq"),
                wk=get("wk"),
                wv=get("wv"),
                num_heads=config.num_heads,
                bq=get("bq"),
                bk=get("bk"),
                bv=get("bv"),
            )
            weights.blocks.append(
                BlockWeights(
                    ln1_gain=get("ln1_gain"),
                    ln1_bias=get("ln1_bias"),
                    attn=attn,
                    ln2_gain=get("ln2_gain"),
                    ln2_bias=get("ln2_bias"),
                    ffn_w1=get("ffn_w1"),
                    ffn_b1=get("ffn_b1"),
                    ffn_w2=get("ffn_w2"),
                    ffn_b2=get("ffn_b2"),
                )
            )
            index += 1
        if config.variant == "speechformer" and stage < 3:
            j = len(weights.merges)
            weights.merges.append(
                MergeWeights(w=arrays[merge_key(j, "w")], b=arrays[merge_key(j, "b")])
            )
    weights.head_w = arrays[HEAD_W_KEY]
    weights.head_b = arrays[HEAD_B_KEY]
    return weights


def param_count(config: ModelConfig, weights: ModelWeights) -> int:
    return sum(a.size for a in named_tensors(config, weights).values())


def _ffn(x, bw: BlockWeights):
    h = kernel.linear(x, bw.ffn_w1, bw.ffn_b1)
    h = np.maximum(h, 0.0)
    return kernel.linear(h, bw.ffn_w2, bw.ffn_b2)


def transformer_block(x, bw: BlockWeights, config: ModelConfig) -> np.ndarray:
    """Pre-norm residual block with full multi-head attention."""
    x = kernel.as_matrix(x)
    x = x + msa(kernel.layer_norm(x, bw.ln1_gain, bw.ln1_bias), bw.attn, config.scale_mode)
    return x + _ffn(kernel.layer_norm(x, bw.ln2_gain, bw.ln2_bias), bw)


def speechformer_block(
    x, bw: BlockWeights, window: WindowSpec, config: ModelConfig
) -> np.ndarray:
    """Pre-norm residual block with windowed multi-head attention."""
    x = kernel.as_matrix(x)
    x = x + speech_msa(
        kernel.layer_norm(x, bw.ln1_gain, bw.ln1_bias), bw.attn, window, config.scale_mode
    )
    return x + _ffn(kernel.layer_norm(x, bw.ln2_gain, bw.ln2_bias), bw)


def merging_block(x, m: int, w, bias) -> np.ndarray:
    """Pool m consecutive tokens, then apply a width-changing linear layer."""
    return kernel.linear(kernel.avg_pool_groups(x, m), w, bias)


@dataclass
class ForwardTrace:
    """Shapes seen entering each stage, plus the classifier logits."""

    stage_shapes: list[tuple[int, int]]
    logits: np.ndarray
    stage_outputs: list[np.ndarray] | None = None


def forward(
    x,
    weights: ModelWeights,
    config: ModelConfig,
    schedule: StageSchedule | None = None,
    keep_stage_outputs: bool = False,
) -> ForwardTrace:
    """Run the full encoder and classification head on one feature matrix.

    The input is T x d_model. Positional encoding is added once, before
    the first stage. The head mean-pools over tokens and applies a single
    linear layer to produce ``num_classes`` logits.
    """
    x = kernel.as_matrix(x)
    if x.shape[0] < 1:
        raise ValueError("input must contain at least one token")
    if x.shape[1] != config.d_model:
        raise ShapeError(
            f"input width {x.shape[1]} does not match d_model {config.d_model}"
        )
    if not np.isfinite(x).all():
        raise ValueError("input features must be finite")
    if len(weights.blocks) != config.num_blocks():
        raise ConfigError(
            f"weights carry {len(weights.blocks)} blocks, config wants {config.num_blocks()}"
        )

    x = x + kernel.sinusoidal_positions(x.shape[0], x.shape[1])
    shapes: list[tuple[int, int]] = []
    outputs: list[np.ndarray] | None = [] if keep_stage_outputs else None

    if config.variant == "baseline":
        shapes.append(x.shape)
        for bw in weights.blocks:
            x = transformer_block(x, bw, config)
        if outputs is not None:
            outputs.append(x)
    else:
        if schedule is None:
            schedule = derive_schedule(config.hop1_ms)
        index = 0
        for stage, n_blocks in enumerate(config.blocks_per_stage):
            shapes.append(x.shape)
            # Utterance stage: window is its own input length; 2*T guarantees
            # every clamped span covers the whole sequence.
            tw = schedule.window_tokens[stage] if stage < 3 else 2 * x.shape[0]
            window = WindowSpec(tw)
            for _ in range(n_blocks):
                x = speechformer_block(x, weights.blocks[index], window, config)
                index += 1
            if outputs is not None:
                outputs.append(x)
            if stage < 3:
                mw = weights.merges[stage]
                x = merging_block(x, schedule.merge_scales[stage], mw.w, mw.b)

    pooled = x.mean(axis=0, keepdims=True)
    logits = kernel.linear(pooled, weights.head_w, weights.head_b)[0]
    return ForwardTrace(stage_shapes=shapes, logits=logits, stage_outputs=outputs)


def with_identity_merges(config: ModelConfig, weights: ModelWeights) -> ModelWeights:
    """Copy of ``weights`` whose merging linears are exact identities.

    Useful for structural-degeneracy comparisons against the baseline.
    Requires all expand factors to be 1.
    """
    if any(r != 1 for r in config.expand_factors):
        raise ConfigError("identity merges require expand factors of 1")
    merges = [
        MergeWeights(w=np.eye(config.d_model), b=np.zeros(config.d_model))
        for _ in range(3)
    ]
    return replace(weights, merges=merges)
