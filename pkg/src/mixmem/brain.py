"""Toy transformer encoder over voxel signals, plus its three projection heads.

The encoder patchifies a signal vector into contiguous chunks, embeds each
chunk, prepends a learned global token, and runs pre-norm self-attention
blocks.  The first output token (projected to the shared embedding width)
summarizes the signal for alignment and classification; the remaining tokens
keep positional structure for routing and fusion downstream.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError

_POOL_AXIS = -2  # frames / tokens sit on the second-to-last axis everywhere


@dataclass
class BrainModelConfig:
    n_voxels: int = 256
    n_layers: int = 2
    d_model: int = 32
    n_tokens: int = 8
    d_clip: int = 64
    d_act: int = 48
    n_classes: int = 15
    n_heads: int = 1
    mlp_ratio: int = 4

    def validate(self):
        for field in ("n_voxels", "n_layers", "d_model", "n_tokens", "d_clip",
                      "d_act", "n_classes", "n_heads", "mlp_ratio"):
            if getattr(self, field) < 1:
                raise DimensionError(f"BrainModelConfig.{field} must be positive")
        if self.d_model % self.n_heads:
            raise DimensionError("d_model must divide n_heads")
        return self


@dataclass
class BrainEncoding:
    global_token: T.Tensor   # [d_clip], or [B, d_clip] from the batch path
    embedding: T.Tensor      # [n_tokens, d_model], or [B, n_tokens, d_model]


class EncoderBlock:
    def __init__(self, name, cfg, rng):
        d = cfg.d_model
        self.ln1_gain = T.Parameter(f"{name}.ln1.gain", np.ones(d))
        self.ln1_bias = T.Parameter(f"{name}.ln1.bias", np.zeros(d))
        self.attn = T.AttentionParams.create(
            f"{name}.attn", d, d, d, rng.split("attn"),
            n_heads=cfg.n_heads, with_output=True)
        self.ln2_gain = T.Parameter(f"{name}.ln2.gain", np.ones(d))
        self.ln2_bias = T.Parameter(f"{name}.ln2.bias", np.zeros(d))
        self.fc1 = T.Linear(f"{name}.fc1", d, d * cfg.mlp_ratio, rng.split("fc1"))
        self.fc2 = T.Linear(f"{name}.fc2", d * cfg.mlp_ratio, d, rng.split("fc2"))

    def __call__(self, x):
        h = T.layer_norm(x, self.ln1_gain, self.ln1_bias)
        x = T.add(x, T.cross_attention(h, h, self.attn))
        h = T.layer_norm(x, self.ln2_gain, self.ln2_bias)
        return T.add(x, self.fc2(T.gelu(self.fc1(h))))

    def named_parameters(self):
        out = [(p.name, p) for p in (self.ln1_gain, self.ln1_bias,
                                     self.ln2_gain, self.ln2_bias)]
        out += self.attn.named_parameters()
        out += self.fc1.named_parameters() + self.fc2.named_parameters()
        return out


class BrainModel:
    """Signal encoder plus image / action / class heads."""

    def __init__(self, cfg: BrainModelConfig, rng: T.Rng):
        cfg.validate()
        self.cfg = cfg
        self.patch = -(-cfg.n_voxels // cfg.n_tokens)  # ceil; short tail zero-padded
        self.pad = self.patch * cfg.n_tokens - cfg.n_voxels
        self.embed = T.Linear("brain.embed", self.patch, cfg.d_model, rng.split("embed"))
        self.global_embed = T.Parameter(
            "brain.global_embed", rng.split("global").normal((cfg.d_model,), 0.02))
        self.pos = T.Parameter(
            "brain.pos", rng.split("pos").normal((cfg.n_tokens + 1, cfg.d_model), 0.02))
        self.blocks = [EncoderBlock(f"brain.block{i}", cfg, rng.split(f"block{i}"))
                       for i in range(cfg.n_layers)]
        self.ln_gain = T.Parameter("brain.ln.gain", np.ones(cfg.d_model))
        self.ln_bias = T.Parameter("brain.ln.bias", np.zeros(cfg.d_model))
        self.out = T.Linear("brain.out", cfg.d_model, cfg.d_clip, rng.split("out"))
        self.image_head = T.Linear("head.image", cfg.d_clip, cfg.d_clip, identity_init=True)
        self.action_head = T.Linear("head.action", cfg.d_clip, cfg.d_act, rng.split("head_act"))
        self.class_head = T.Linear("head.class", cfg.d_clip, cfg.n_classes, rng.split("head_cls"))

    # -- encoder -------------------------------------------------------------

    def encode_batch(self, signals) -> BrainEncoding:
        """Encode [B, n_voxels] signals to ([B, d_clip], [B, n_tokens, d_model])."""
        signals = T.astensor(signals)
        if signals.ndim != 2 or signals.shape[1] != self.cfg.n_voxels:
            raise DimensionError(
                f"expected [B, {self.cfg.n_voxels}] signals, got {signals.shape}")
        B = signals.shape[0]
        if self.pad:
            zeros = T.Tensor(np.zeros((B, self.pad), dtype=signals.data.dtype))
            signals = T.concat([signals, zeros], axis=1)
        tokens = self.embed(T.reshape(signals, (B, self.cfg.n_tokens, self.patch)))
        gtok = T.broadcast_rows(T.reshape(self.global_embed, (1, self.cfg.d_model)), B)
        x = T.add(T.concat([T.reshape(gtok, (B, 1, self.cfg.d_model)), tokens], axis=1),
                  self.pos)
        for block in self.blocks:
            x = block(x)
        x = T.layer_norm(x, self.ln_gain, self.ln_bias)
        return BrainEncoding(global_token=self.out(x[:, 0, :]), embedding=x[:, 1:, :])

    def encode(self, signal) -> BrainEncoding:
        """Single-signal convenience wrapper around encode_batch."""
        signal = T.astensor(signal)
        if signal.ndim != 1:
            raise DimensionError(f"expected a [n_voxels] signal, got {signal.shape}")
        enc = self.encode_batch(T.reshape(signal, (1, -1)))
        return BrainEncoding(global_token=enc.global_token[0],
                             embedding=enc.embedding[0])

    # -- heads ---------------------------------------------------------------

    def consolidate_frames(self, frame_embeddings):
        """Mean-pool [F, d_clip] (or [B, F, d_clip]) frames, then the image head."""
        frame_embeddings = T.astensor(frame_embeddings)
        if frame_embeddings.shape[_POOL_AXIS] == 0:
            raise DimensionError("consolidate_frames needs at least one frame")
        return _apply_head(self.image_head, T.tmean(frame_embeddings, axis=_POOL_AXIS))

    def action_project(self, global_token):
        return _apply_head(self.action_head, global_token)

    def classify(self, global_token):
        """Raw class logits; apply a sigmoid for probabilities."""
        return _apply_head(self.class_head, global_token)

    def named_parameters(self):
        out = self.embed.named_parameters()
        out += [(self.global_embed.name, self.global_embed), (self.pos.name, self.pos)]
        for block in self.blocks:
            out += block.named_parameters()
        out += [(self.ln_gain.name, self.ln_gain), (self.ln_bias.name, self.ln_bias)]
        out += self.out.named_parameters()
        out += self.image_head.named_parameters()
        out += self.action_head.named_parameters()
        out += self.class_head.named_parameters()
        return out


def _apply_head(head, x):
    """Apply a linear head to a single vector or a batch of row vectors."""
    x = T.astensor(x)
    if x.ndim == 1:
        return head(T.reshape(x, (1, -1)))[0]
    return head(x)
