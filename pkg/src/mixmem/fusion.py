"""Integration of retrieved memories into the conditioning stream.

Token features attend over the retrieved image and action memories through
two cross-attention branches, and the result enters the conditioning tokens
through a zero-initialized gate.  Both gates start at exactly zero, so an
untrained fusion stage passes the retrieved text embedding through bitwise
unchanged; training opens the gates gradually.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, PoolError


@dataclass
class FusionParams:
    attn_img: T.AttentionParams
    attn_act: T.AttentionParams
    norm_gain: T.Parameter
    norm_bias: T.Parameter
    gate_fmri: T.Linear
    gate_txt: T.Linear
    alpha: float = 1.0

    @classmethod
    def create(cls, d_model, d_clip, d_act, rng, alpha=1.0, name="fusion"):
        return cls(
            attn_img=T.AttentionParams.create(
                f"{name}.attn_img", d_model, d_clip, d_model, rng.split("img")),
            attn_act=T.AttentionParams.create(
                f"{name}.attn_act", d_model, d_act, d_model, rng.split("act")),
            norm_gain=T.Parameter(f"{name}.norm.gain", np.ones(d_model)),
            norm_bias=T.Parameter(f"{name}.norm.bias", np.zeros(d_model)),
            gate_fmri=T.Linear(f"{name}.gate_fmri", d_model, d_clip, zero_init=True),
            gate_txt=T.Linear(f"{name}.gate_txt", d_clip, d_clip, zero_init=True),
            alpha=alpha)

    def named_parameters(self):
        out = self.attn_img.named_parameters() + self.attn_act.named_parameters()
        out += [(self.norm_gain.name, self.norm_gain),
                (self.norm_bias.name, self.norm_bias)]
        out += self.gate_fmri.named_parameters() + self.gate_txt.named_parameters()
        return out


@dataclass
class FusedCondition:
    tokens: T.Tensor  # [n_tokens, d_clip], or [B, n_tokens, d_clip] batched


def attend_memories(f_e, image_mems, action_mems, params: FusionParams):
    """Sum of two cross-attention reads, one per memory modality.

    `f_e` is the query token matrix [L, d_model] (a leading batch axis is
    allowed when the memory stacks carry a matching one).
    """
    f_e = T.astensor(f_e)
    image_mems, action_mems = T.astensor(image_mems), T.astensor(action_mems)
    if image_mems.shape[-2] == 0 or action_mems.shape[-2] == 0:
        raise PoolError("attend_memories needs at least one retrieved memory")
    return T.add(T.cross_attention(f_e, image_mems, params.attn_img),
                 T.cross_attention(f_e, action_mems, params.attn_act))


def fuse(f_e_hat, text_mem, params: FusionParams) -> FusedCondition:
    """Gated residual merge of attended tokens with the retrieved text vector.

    z_f gates the normalized token stream into the text embedding space; z_t
    is a gated residual on the text vector, broadcast across token positions.
    """
    f_e_hat, text_mem = T.astensor(f_e_hat), T.astensor(text_mem)
    if f_e_hat.ndim - text_mem.ndim != 1:
        raise DimensionError(
            f"tokens {f_e_hat.shape} need exactly one more axis than text {text_mem.shape}")
    z_f = params.gate_fmri(T.layer_norm(f_e_hat, params.norm_gain, params.norm_bias))
    t = text_mem if text_mem.ndim > 1 else T.reshape(text_mem, (1, -1))
    z_t = T.add(params.gate_txt(t), t)
    if f_e_hat.ndim == 3:
        z_t = T.reshape(z_t, (z_t.shape[0], 1, z_t.shape[1]))
    return FusedCondition(tokens=T.add(z_t, T.mul(z_f, params.alpha)))
