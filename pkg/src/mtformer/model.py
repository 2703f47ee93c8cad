"""Parameter construction and the end to end forward pass.

Parameters live twice: structured bundles the layer code consumes, and one
flat name -> Tensor dict in declaration order.  The flat view is the single
source of truth for checkpoints, optimizers, and parameter counting; both
views reference the same Tensor objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import (ArchConfig, count_parameters, decoder_channels,
                     require_valid, stage_channels, task_channels)
from .decoder import (Block2P, CrossP, DecoderParams, HeadP, TaskDecoderP,
                      TaskStageP, decode, task_head)
from .encoder import EncoderParams, MergeP, encode
from .layers import BlockP, LinearP, NormP
from .tensor import Tensor

INIT_STD = 0.02


@dataclass
class Model:
    cfg: ArchConfig
    flat: dict  # name -> Tensor, declaration order
    encoder: EncoderParams
    decoder: DecoderParams
    heads: dict  # task -> HeadP

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.flat.values())


class _Builder:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.flat: dict = {}

    def _register(self, name: str, arr: np.ndarray) -> Tensor:
        assert name not in self.flat, f"duplicate parameter {name}"
        t = Tensor(arr.astype(self.dtype), requires_grad=True)
        self.flat[name] = t
        return t

    def weight(self, name: str, shape) -> Tensor:
        # clipped normal, the usual transformer table/projection init
        vals = self.rng.normal(0.0, INIT_STD, size=shape)
        return self._register(name, np.clip(vals, -2 * INIT_STD, 2 * INIT_STD))

    def linear(self, name: str, c_in: int, c_out: int, bias: bool = True) -> LinearP:
        w = self.weight(f"{name}.weight", (c_in, c_out))
        b = self._register(f"{name}.bias", np.zeros(c_out)) if bias else None
        return LinearP(w, b)

    def norm(self, name: str, c: int) -> NormP:
        return NormP(self._register(f"{name}.gamma", np.ones(c)),
                     self._register(f"{name}.beta", np.zeros(c)))

    def table(self, name: str, window: int, heads: int) -> Tensor:
        return self.weight(name, ((2 * window - 1) ** 2, heads))

    def block(self, name: str, c: int, heads: int, window: int, ratio: int) -> BlockP:
        return BlockP(
            ln1=self.norm(f"{name}.ln1", c),
            q=self.linear(f"{name}.q", c, c),
            k=self.linear(f"{name}.k", c, c),
            v=self.linear(f"{name}.v", c, c),
            out=self.linear(f"{name}.out", c, c),
            table=self.table(f"{name}.bias_table", window, heads),
            ln2=self.norm(f"{name}.ln2", c),
            fc1=self.linear(f"{name}.fc1", c, ratio * c),
            fc2=self.linear(f"{name}.fc2", ratio * c, c),
        )


def init_params(cfg: ArchConfig, seed: int = 0, dtype=np.float64) -> Model:
    """Build all parameters for ``cfg``; same seed and dtype gives bitwise
    identical tensors.  Instantiated sizes always match count_parameters."""
    require_valid(cfg)
    b = _Builder(seed, dtype)
    enc_ch = stage_channels(cfg)

    embed = b.linear("patch_embed", 3 * cfg.patch_size ** 2, cfg.base_channels)
    stages, merges = [], []
    for s in range(4):
        stages.append([
            b.block(f"encoder.s{s}.b{d}", enc_ch[s], cfg.encoder_heads[s],
                    cfg.window, cfg.mlp_ratio)
            for d in range(cfg.stage_depths[s])
        ])
        if s < 3:
            merges.append(MergeP(
                norm=b.norm(f"encoder.merge{s}.ln", 4 * enc_ch[s]),
                w=b.weight(f"encoder.merge{s}.weight", (4 * enc_ch[s], 2 * enc_ch[s]))))
    encoder = EncoderParams(embed, stages, merges)

    dec_ch = decoder_channels(cfg)
    ratio = cfg.decoder_mlp_ratio
    tasks: dict = {}
    cross: list = [None] * 4 if cfg.shared_attention else []
    for t in cfg.tasks:
        init = b.linear(f"decoder.{t}.init", dec_ch[0], dec_ch[0])
        task_stages, expands = [], []
        for i in range(4):
            ci = dec_ch[i]
            base = f"decoder.{t}.s{i}"
            fuse = b.linear(f"{base}.fuse", ci, ci)
            block1 = b.block(f"{base}.b1", ci, cfg.decoder_heads[i], cfg.window, ratio)
            if cfg.shared_attention:
                is_ref = t == cfg.reference_task
                ln1 = b.norm(f"{base}.b2.ln1", ci)
                qk = (b.linear(f"{base}.b2.q", ci, ci),
                      b.linear(f"{base}.b2.k", ci, ci)) if is_ref else None
                v = b.linear(f"{base}.b2.v", ci, ci)
                out = b.linear(f"{base}.b2.out", ci, ci)
                if is_ref:
                    cross[i] = CrossP(qk[0], qk[1],
                                      b.table(f"{base}.b2.bias_table", cfg.window,
                                              cfg.decoder_heads[i]))
                block2 = Block2P(
                    ln1=ln1, v=v, out=out,
                    ln2=b.norm(f"{base}.b2.ln2", ci),
                    fc1=b.linear(f"{base}.b2.fc1", ci, ratio * ci),
                    fc2=b.linear(f"{base}.b2.fc2", ratio * ci, ci),
                )
            else:
                block2 = b.block(f"{base}.b2", ci, cfg.decoder_heads[i], cfg.window, ratio)
            task_stages.append(TaskStageP(fuse, block1, block2))
            if i < 3:
                expands.append(b.weight(f"decoder.{t}.expand{i}.weight", (ci, 2 * ci)))
        tasks[t] = TaskDecoderP(init, task_stages, expands)

    heads = {}
    c = cfg.base_channels
    for t in cfg.tasks:
        heads[t] = HeadP(
            expand1=b.weight(f"head.{t}.expand1.weight", (c, 2 * c)),
            expand2=b.weight(f"head.{t}.expand2.weight", (c // 2, c)),
            out=b.linear(f"head.{t}.out", c // 4, task_channels(cfg, t)))
    if "N" in cfg.tasks:
        # start the normals stream at a fixed, slightly tilted unit normal.
        # Unit normalization divides by the output norm, and the stacked
        # small-std head projections leave that norm near zero otherwise,
        # making the early gradients arbitrarily steep; the tilt keeps the
        # start from tying exactly with the upright background normal, an
        # L1 subgradient degeneracy
        heads["N"].out.b.data[:] = (0.06, 0.08, 1.0)

    model = Model(cfg, b.flat, encoder, DecoderParams(tasks, cross), heads)
    expected = count_parameters(cfg).total
    actual = model.parameter_count()
    assert actual == expected, f"built {actual} parameters, accounting says {expected}"
    return model


def forward(model: Model, img: Tensor) -> dict:
    """Image [H, W, 3] to per-task predictions [H, W, task_channels]."""
    pyramid = encode(img, model.cfg, model.encoder)
    streams = decode(pyramid, model.cfg, model.decoder)
    return {t: task_head(streams[t], t, model.cfg, model.heads[t])
            for t in model.cfg.tasks}
