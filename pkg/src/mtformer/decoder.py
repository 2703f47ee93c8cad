"""Mirrored per-task decoders coupled by shared cross-task attention.

Each task runs its own four stage decoder over the encoder pyramid, deepest
skip first.  A stage fuses the skip additively, runs a per-task
self-attention block on regular windows, then a shared-attention block on
shifted windows: the attention probabilities are computed once from the
skip feature using the reference task's query/key projections and applied
to every task's values.  Three patch expansions restore the grid to 1/4
resolution; task heads upsample twice more and map to task channels.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ArchConfig, decoder_channels, task_channels
from .errors import ConfigurationError, DimensionError
from .layers import (BlockP, LinearP, NormP, apply_attention, attention_block,
                     attention_weights, linear, mlp, norm)
from .tensor import (Tensor, add, div, matmul, mul, reshape, sigmoid,
                     softmax_lastdim, sqrt, sum_, transpose)
from .windowing import WindowGrid


@dataclass
class Block2P:
    """Task-owned half of a shared-attention block (no q/k, no bias table)."""

    ln1: NormP
    v: LinearP
    out: LinearP
    ln2: NormP
    fc1: LinearP
    fc2: LinearP


@dataclass
class CrossP:
    """Reference-owned projections of one shared-attention stage."""

    q: LinearP
    k: LinearP
    table: Tensor


@dataclass
class SharedAttentionP:
    """Everything one shared-attention application needs: the reference q/k
    plus each participating task's value and output projections."""

    q: LinearP
    k: LinearP
    table: Tensor
    v: dict
    out: dict


@dataclass
class TaskStageP:
    fuse: LinearP
    block1: BlockP
    block2: object  # Block2P when sharing, full BlockP otherwise


@dataclass
class TaskDecoderP:
    init: LinearP
    stages: list
    expands: list  # three bias-free [C, 2C] matrices


@dataclass
class DecoderParams:
    tasks: dict  # task id -> TaskDecoderP
    cross: list  # four CrossP when sharing, else empty


@dataclass
class HeadP:
    expand1: Tensor
    expand2: Tensor
    out: LinearP


@dataclass
class DecoderStageState:
    """Per-task token maps plus the encoder skip feeding this stage."""

    xs: dict
    skip: Tensor


def patch_expand(x: Tensor, side: int, w: Tensor) -> Tensor:
    """Double the grid side and halve the channels.

    Bias-free projection C -> 2C, then each token's 2C channels fill its
    2x2 output block row major: chunk 0 -> (0,0), 1 -> (0,1), 2 -> (1,0),
    3 -> (1,1), each chunk C/2 wide.  Exact inverse layout of patch_merge.
    """
    n, c = x.shape
    if n != side * side:
        raise DimensionError(f"{n} tokens do not fill grid {side}x{side}")
    if w.shape != (c, 2 * c):
        raise DimensionError(f"patch_expand weight {w.shape} must be ({c}, {2 * c})")
    t = matmul(x, w)
    t = reshape(t, (side, side, 2, 2, c // 2))
    t = transpose(t, (0, 2, 1, 3, 4))
    return reshape(t, (4 * n, c // 2))


def shared_attention(x_sa: Tensor, xs: dict, p: SharedAttentionP,
                     grid: WindowGrid, shifted: bool) -> dict:
    """One attention map from the skip, per-task values, per-task residual.

    q = Q_r(x_sa) and k = K_r(x_sa) are computed once; every task t gets
    y^t = x^t + Out_t(A V_t(x^t)) with the same A.
    """
    shift = grid.shift if shifted else 0
    n, c = x_sa.shape
    sa2d = reshape(x_sa, (grid.h, grid.w, c))
    weights = attention_weights(sa2d, p.q, p.k, p.table, grid, shift)
    out = {}
    for t, x in xs.items():
        x2d = reshape(x, (grid.h, grid.w, x.shape[-1]))
        part = apply_attention(weights, x2d, p.v[t], p.out[t], grid, shift)
        out[t] = add(x, reshape(part, x.shape))
    return out


def decoder_stage(state: DecoderStageState, stage_index: int, cfg: ArchConfig,
                  params: DecoderParams, grid: WindowGrid) -> dict:
    """Skip fusion, per-task self attention, then the cross-task block."""
    xs = {}
    for t, x in state.xs.items():
        stage = params.tasks[t].stages[stage_index]
        x = add(x, linear(state.skip, stage.fuse))
        xs[t] = attention_block(x, stage.block1, grid, shifted=False)

    if not cfg.shared_attention:
        return {t: attention_block(xs[t], params.tasks[t].stages[stage_index].block2,
                                   grid, shifted=True)
                for t in xs}

    cross = params.cross[stage_index]
    blocks = {t: params.tasks[t].stages[stage_index].block2 for t in xs}
    # pre-norm skeleton: values come from LN(x), the residual from x itself,
    # attention weights from the raw skip feature
    sa2d = reshape(state.skip, (grid.h, grid.w, state.skip.shape[-1]))
    weights = attention_weights(sa2d, cross.q, cross.k, cross.table, grid, grid.shift)
    out = {}
    for t, x in xs.items():
        b = blocks[t]
        h2 = reshape(norm(x, b.ln1), (grid.h, grid.w, x.shape[-1]))
        part = apply_attention(weights, h2, b.v, b.out, grid, grid.shift)
        y = add(x, reshape(part, x.shape))
        out[t] = add(y, mlp(norm(y, b.ln2), b.fc1, b.fc2))
    return out


def decode(pyramid, cfg: ArchConfig, params: DecoderParams) -> dict:
    """Run every task decoder over skips F4, F3, F2, F1; returns token maps
    at 1/4 resolution with C channels per task."""
    skips = tuple(pyramid)[::-1]
    sides = pyramid.sides[::-1]
    widths = decoder_channels(cfg)
    xs = {t: linear(skips[0], params.tasks[t].init) for t in cfg.tasks}
    for i in range(4):
        if skips[i].shape != (sides[i] * sides[i], widths[i]):
            raise DimensionError(
                f"skip {i} has shape {skips[i].shape}, expected ({sides[i] * sides[i]}, {widths[i]})")
        grid = WindowGrid(sides[i], sides[i], cfg.window, cfg.shift)
        xs = decoder_stage(DecoderStageState(xs, skips[i]), i, cfg, params, grid)
        if i < 3:
            xs = {t: patch_expand(xs[t], sides[i], params.tasks[t].expands[i])
                  for t in xs}
    return xs


def task_head(y: Tensor, task: str, cfg: ArchConfig, p: HeadP) -> Tensor:
    """Two patch expansions to full resolution, a linear map to task channels,
    and the task's output activation (softmax / sigmoid / unit normals)."""
    side = cfg.img_size // cfg.patch_size
    x = patch_expand(y, side, p.expand1)
    x = patch_expand(x, 2 * side, p.expand2)
    x = linear(x, p.out)
    x = reshape(x, (cfg.img_size, cfg.img_size, task_channels(cfg, task)))
    if task == "S":
        return softmax_lastdim(x)
    if task == "N":
        # 1e-24 keeps the gradient finite for a zero vector without moving
        # any realistic output off unit length
        nrm = sqrt(add(sum_(mul(x, x), axis=-1, keepdims=True), 1e-24))
        return div(x, nrm)
    if task in ("D", "K", "E", "R"):
        return sigmoid(x)
    raise ConfigurationError(f"unknown task id {task!r}")
