"""MLP noise predictor conditioned on the query embedding and timestep."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import ParameterStore, glorot


@dataclass(frozen=True)
class DenoiserConfig:
    n_entities: int
    cond_dim: int
    hidden: int = 128
    mlp: int = 256
    blocks: int = 1
    steps: int = 40
    scale_shift: bool = True
    timestep: str = "sinusoidal"
    no_block: bool = False
    no_condition: bool = False

    def arch(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def sinusoid(k, dim):
    """Interleaved sin/cos features: [2i] = sin(k / 10000^(2i/dim)), [2i+1] = cos(...)."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    i = np.arange(0, dim, 2)
    angles = k[:, None] / np.power(10000.0, i / dim)[None, :]
    out = np.empty((len(k), dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : dim // 2])
    return out


class CDenoiser:
    def __init__(self, cfg: DenoiserConfig, seed=0, dtype=np.float64):
        if cfg.blocks < 1:
            raise ValueError("need at least one block")
        if cfg.timestep not in ("sinusoidal", "table"):
            raise ValueError(f"unknown timestep representation {cfg.timestep!r}")
        self.cfg = cfg
        self.params = ParameterStore("denoiser", dtype)
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        c, p = self.cfg, self.params
        n, dh = c.n_entities, c.hidden
        p.add("in_w", glorot(rng, n, dh))
        p.add("in_b", np.zeros(dh))
        p.add("cond_w", glorot(rng, c.cond_dim, dh))
        p.add("cond_b", np.zeros(dh))
        if c.timestep == "table":
            p.add("time_table", rng.normal(0.0, 0.02, (c.steps + 1, dh)))
        else:
            p.add("time_w", glorot(rng, dh, dh))
            p.add("time_b", np.zeros(dh))
        p.add("ct_w", glorot(rng, dh, dh))
        p.add("ct_b", np.zeros(dh))
        if not c.no_block:
            for i in range(c.blocks):
                p.add(f"block{i}_ln_g", np.ones(dh))
                p.add(f"block{i}_ln_b", np.zeros(dh))
                p.add(f"block{i}_w1", glorot(rng, dh, c.mlp))
                p.add(f"block{i}_b1", np.zeros(c.mlp))
                p.add(f"block{i}_w2", glorot(rng, c.mlp, dh))
                p.add(f"block{i}_b2", np.zeros(dh))
                if c.scale_shift:
                    p.add(f"block{i}_mod_w", rng.normal(0.0, 0.02, (dh, 2 * dh)))
                    p.add(f"block{i}_mod_b", np.zeros(2 * dh))
                # gate regressor starts at exactly zero
                p.add(f"block{i}_gate_w", np.zeros((dh, dh)))
                p.add(f"block{i}_gate_b", np.zeros(dh))
        p.add("out_ln_g", np.ones(dh))
        p.add("out_ln_b", np.zeros(dh))
        p.add("out_w", glorot(rng, dh, n))
        p.add("out_b", np.zeros(n))

    def timestep_embed(self, k):
        p = self.params
        k = np.atleast_1d(np.asarray(k, dtype=np.int64))
        if self.cfg.timestep == "table":
            return ad.take(p["time_table"], k)
        return ad.Tensor(sinusoid(k, self.cfg.hidden)) @ p["time_w"] + p["time_b"]

    def condition_embed(self, cond, k):
        p = self.params
        cond = cond if isinstance(cond, ad.Tensor) else ad.Tensor(np.atleast_2d(cond))
        if self.cfg.no_condition:
            cond = ad.Tensor(np.zeros(cond.shape))
        return (cond @ p["cond_w"] + p["cond_b"] + self.timestep_embed(k)) @ p["ct_w"] + p["ct_b"]

    def forward(self, x_k, k, cond, return_stream=False):
        """Noise estimate for latents ``x_k`` (B, N) at steps ``k`` given ``cond`` (B, d)."""
        p, c = self.params, self.cfg
        x_k = x_k if isinstance(x_k, ad.Tensor) else ad.Tensor(np.atleast_2d(x_k))
        b = x_k.shape[0]
        k = np.broadcast_to(np.asarray(k, dtype=np.int64), (b,))
        ct = self.condition_embed(cond, k)
        h = x_k @ p["in_w"] + p["in_b"]
        if c.no_block:
            h = h + ct
        else:
            act = ad.gelu(ct)
            for i in range(c.blocks):
                try:
                    h = self._block(i, h, act)
                except ad.NonFiniteError as err:
                    raise ad.NonFiniteError(f"denoiser block {i}: {err}") from None
        eps = (ad.layer_norm(h) * p["out_ln_g"] + p["out_ln_b"]) @ p["out_w"] + p["out_b"]
        return (eps, h) if return_stream else eps

    def _block(self, i, h, act):
        p, c = self.params, self.cfg
        u = ad.layer_norm(h) * p[f"block{i}_ln_g"] + p[f"block{i}_ln_b"]
        if c.scale_shift:
            mod = act @ p[f"block{i}_mod_w"] + p[f"block{i}_mod_b"]
            u = u * (1.0 + mod[:, : c.hidden]) + mod[:, c.hidden:]
        gate = act @ p[f"block{i}_gate_w"] + p[f"block{i}_gate_b"]
        mlp = ad.gelu(u @ p[f"block{i}_w1"] + p[f"block{i}_b1"]) @ p[f"block{i}_w2"] + p[f"block{i}_b2"]
        return h + gate * mlp

    def __call__(self, x_k, k, cond):
        """Array-in/array-out evaluation without recording (used for sampling)."""
        with ad.no_grad():
            return self.forward(x_k, k, cond).data
