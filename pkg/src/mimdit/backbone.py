"""Diffusion-transformer backbone with the per-block conditioning pathway.

Each block extracts conditioning features with its own MoE-in-MoE layer,
projects them through a zero-initialized linear map, concatenates
text/backbone/conditioning token segments into one joint attention, and
splits the result back. Patch flattening plus a linear embed stands in for
a latent encoder at desk scale; a learned null-text bank stands in for a
text encoder.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams, TokenSequence, multihead_attention
from .errors import ConfigurationError, ContractError, DimensionError, PersistenceError
from .nn import LayerNorm, Linear, Module, parameter
from .routing import MiM, MiMConfig

CHECKPOINT_MAGIC = b"MIMD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LatentState:
    """The three fixed-length token segments threaded through the blocks."""

    z_text: T.Tensor  # [L_text, D]
    z_dit: T.Tensor  # [L, D]
    z_mim: T.Tensor | None  # [L, D]; None before the first block runs
    t: float


class TimeEmbedding(Module):
    """Sinusoidal features of t (scaled by 1000) refined by a two-layer MLP."""

    def __init__(self, dim, rng):
        if dim % 2 != 0:
            raise ConfigurationError(f"time embedding dim must be even, got {dim}")
        self.lin1 = Linear(dim, dim, rng)
        self.lin2 = Linear(dim, dim, rng)
        self.dim = dim

    def __call__(self, t):
        half = self.dim // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
        args = 1000.0 * float(t) * freqs
        base = T.Tensor(np.concatenate([np.sin(args), np.cos(args)])[None, :])
        return self.lin2(T.gelu(self.lin1(base)))


def zero_linear(x, p):
    """Affine map that contributes nothing at initialization (zero weights and bias)."""
    return p(x)


class DiTBlock(Module):
    """Pre-norm transformer block over the concatenated token segments.

    Adaptive scale/shift from the time embedding modulates only the
    backbone-token segment; the conditioning segment enters through the
    zero-initialized projection so the block matches its conditioning-free
    twin at initialization.
    """

    def __init__(self, config, rng, block_index, router_init="zero"):
        d = config.model_dim
        self.mim = MiM(config, rng, block_index=block_index, router_init=router_init)
        self.zero_proj = Linear(d, d, zero_init=True)
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        self.attention = AttentionParams(d, rng, heads=config.heads)
        self.mlp_in = Linear(d, 4 * d, rng)
        self.mlp_out = Linear(4 * d, d, rng)
        self.time_mod = Linear(d, 4 * d, zero_init=True)
        self.block_index = block_index
        self.grid = (config.grid_height, config.grid_width)

    def _modulate_segment(self, h, lengths, scale, shift):
        text, dit, cond = T.split(h, lengths, axis=0)
        dit = dit * (scale + 1.0) + shift
        return T.concat([text, dit, cond], axis=0)

    def forward(self, state, z_lq_emb, t_emb, *, use_conditioning=True, trace_sink=None, aux_sink=None, label=None):
        l_text, d = state.z_text.shape
        l_tokens = state.z_dit.shape[0]
        if use_conditioning:
            if self.block_index == 0:
                cond_in = z_lq_emb
            else:
                if state.z_mim is None:
                    raise ContractError("conditioning segment missing for a non-initial block")
                cond_in = TokenSequence(state.z_mim, *self.grid)
            if cond_in.length != l_tokens:
                raise ContractError(
                    f"conditioning segment length {cond_in.length} drifted from {l_tokens}"
                )
            z_cond = self.mim.forward(cond_in, trace_sink=trace_sink, label=label, aux_sink=aux_sink)
            cond = zero_linear(z_cond.tokens, self.zero_proj)
        else:
            cond = T.Tensor(np.zeros((l_tokens, d)))

        lengths = [l_text, l_tokens, l_tokens]
        mod = self.time_mod(t_emb)
        s_attn, b_attn, s_mlp, b_mlp = T.split(mod, [d] * 4, axis=1)

        z_cat = T.concat([state.z_text, state.z_dit, cond], axis=0)
        h = self._modulate_segment(self.ln1(z_cat), lengths, s_attn, b_attn)
        z_mid = z_cat + multihead_attention(h, self.attention)
        h2 = self._modulate_segment(self.ln2(z_mid), lengths, s_mlp, b_mlp)
        z_out = z_mid + self.mlp_out(T.gelu(self.mlp_in(h2)))

        new_text, new_dit, new_mim = T.split(z_out, lengths, axis=0)
        return LatentState(z_text=new_text, z_dit=new_dit, z_mim=new_mim, t=state.t)


class MiMDiT(Module):
    """Velocity-field model: patch tokens in, predicted velocity tokens out."""

    def __init__(self, config, rng, router_init="zero"):
        config.validate()
        p_dim = config.latent_dim
        d = config.model_dim
        self.patch_embed = Linear(p_dim, d, rng)
        self.cond_embed = Linear(p_dim, d, rng)
        self.text_bank = parameter(rng.normal(0.0, 0.02, (config.text_tokens, d)))
        self.time_embed = TimeEmbedding(d, rng)
        self.blocks = [DiTBlock(config, rng, i, router_init=router_init) for i in range(config.block_count)]
        self.output_head = Linear(d, p_dim, rng)
        self.config = config

    def velocity(self, z_lq, x_t, t, *, use_conditioning=True, trace_sink=None, aux_sink=None, label=None):
        if not isinstance(z_lq, TokenSequence):
            raise DimensionError("z_lq must be a TokenSequence")
        if z_lq.tokens.shape != x_t.shape:
            raise DimensionError(
                f"degraded latent shape {z_lq.tokens.shape} does not match state shape {x_t.shape}"
            )
        t_emb = self.time_embed(t)
        cond_tokens = TokenSequence(self.cond_embed(z_lq.tokens), z_lq.grid_height, z_lq.grid_width)
        state = LatentState(z_text=self.text_bank, z_dit=self.patch_embed(x_t), z_mim=None, t=float(t))
        for block in self.blocks:
            state = block.forward(
                state,
                cond_tokens,
                t_emb,
                use_conditioning=use_conditioning,
                trace_sink=trace_sink,
                aux_sink=aux_sink,
                label=label,
            )
        return self.output_head(state.z_dit)


def backbone_forward(z_lq, noise_latent, t, model, **kwargs):
    """Predicted velocity for the given state; thin wrapper over the model."""
    return model.velocity(z_lq, noise_latent.tokens, t, **kwargs)


# ---------------------------------------------------------------------------
# Patch flattening (lossless stand-in for a latent encoder)


def patchify(image, patch):
    """[C,H,W] image -> [L, C*patch*patch] row-major patch tokens."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"patchify expects [C,H,W], got shape {image.shape}")
    c, h, w = image.shape
    if h % patch != 0 or w % patch != 0:
        raise ConfigurationError(f"patch {patch} must divide image {h}x{w}")
    gh, gw = h // patch, w // patch
    tokens = (
        image.reshape(c, gh, patch, gw, patch)
        .transpose(1, 3, 0, 2, 4)
        .reshape(gh * gw, c * patch * patch)
    )
    return np.ascontiguousarray(tokens)


def unpatchify(tokens, patch, channels, height, width):
    """Exact inverse of patchify."""
    tokens = np.asarray(tokens, dtype=np.float64)
    gh, gw = height // patch, width // patch
    if tokens.shape != (gh * gw, channels * patch * patch):
        raise DimensionError(
            f"token shape {tokens.shape} does not match grid {gh}x{gw} patches of {channels}x{patch}x{patch}"
        )
    image = (
        tokens.reshape(gh, gw, channels, patch, patch)
        .transpose(2, 0, 3, 1, 4)
        .reshape(channels, height, width)
    )
    return np.ascontiguousarray(image)


def latent_sequence(image, config):
    """Patchify an image into a TokenSequence on the config's token grid."""
    tokens = patchify(image, config.patch)
    return TokenSequence(T.Tensor(tokens), config.grid_height, config.grid_width)


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, config text blob, named tensor table


def save_checkpoint(path, model):
    params = sorted(model.named_parameters())
    blob = model.config.to_text().encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", len(params)))
            for name, tensor in params:
                encoded = name.encode("utf-8")
                f.write(struct.pack("<I", len(encoded)))
                f.write(encoded)
                T.write_tensor(f, tensor)
    except OSError as e:
        raise PersistenceError(f"cannot write checkpoint {path}: {e}")


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise PersistenceError(f"truncated checkpoint {path}: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            magic = _read_exact(f, 4, path)
            if magic != CHECKPOINT_MAGIC:
                raise PersistenceError(f"{path} is not a checkpoint (magic {magic!r})")
            (version,) = struct.unpack("<I", _read_exact(f, 4, path))
            if version != CHECKPOINT_VERSION:
                raise PersistenceError(f"unsupported checkpoint version {version} in {path}")
            (blob_len,) = struct.unpack("<I", _read_exact(f, 4, path))
            config = MiMConfig.from_text(_read_exact(f, blob_len, path).decode("utf-8"))
            model = MiMDiT(config, np.random.default_rng(0))
            (count,) = struct.unpack("<I", _read_exact(f, 4, path))
            table = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<I", _read_exact(f, 4, path))
                name = _read_exact(f, name_len, path).decode("utf-8")
                table[name] = T.read_tensor(f)
    except OSError as e:
        raise PersistenceError(f"cannot read checkpoint {path}: {e}")

    expected = dict(model.named_parameters())
    missing = sorted(set(expected) - set(table))
    extra = sorted(set(table) - set(expected))
    if missing or extra:
        raise ContractError(f"checkpoint parameter table mismatch: missing {missing}, extra {extra}")
    for name, tensor in expected.items():
        loaded = table[name]
        if loaded.shape != tensor.shape:
            raise ContractError(
                f"checkpoint tensor {name} has shape {loaded.shape}, expected {tensor.shape}"
            )
        tensor.data = loaded.data
    return model
