"""Hierarchical MoE-in-MoE routing.

Outer level: dense fusion over four heterogeneous attention expert groups.
Inner level: sparse top-k selection among N sub-experts per group, where
sub-experts share one mechanism but hold independent parameters. Routing
features are mean-pooled tokens; both routers consume the same input.
"""

from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .attention import (
    AttentionParams,
    ChannelAttentionParams,
    SEParams,
    TokenSequence,
    channel_self_attention,
    se_attention,
    spatial_self_attention,
    swin_attention,
)
from .errors import ConfigurationError, ContractError, DimensionError, ParameterError
from .nn import Linear, Module

GROUP_ORDER = ("spatial", "channel", "swin", "se")

VARIANTS = (
    "full",
    "no_intra",
    "spatial_only",
    "channel_only",
    "swin_only",
    "se_only",
    "sparse_inter_sparse_intra",
    "sparse_inter_dense_intra",
)

_SINGLE_MECHANISM_VARIANTS = {
    "spatial_only": "spatial",
    "channel_only": "channel",
    "swin_only": "swin",
    "se_only": "se",
}


@dataclass(frozen=True)
class MiMConfig:
    """Architecture record; everything needed to rebuild a model from a checkpoint."""

    model_dim: int = 16
    block_count: int = 2
    sub_expert_count: int = 4
    top_k: int = 2
    window: int = 2
    heads: int = 1
    se_reduction: int = 4
    patch: int = 4
    image_height: int = 16
    image_width: int = 16
    channels: int = 1
    text_tokens: int = 2
    mim_residual: bool = True
    variant: str = "full"
    group_count: int = 4

    def validate(self):
        if self.group_count != 4:
            raise ConfigurationError(f"group_count is fixed at 4, got {self.group_count}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 1 <= self.top_k <= self.sub_expert_count:
            raise ConfigurationError(
                f"top_k {self.top_k} must satisfy 1 <= k <= N={self.sub_expert_count}"
            )
        for name in ("model_dim", "block_count", "window", "heads", "patch", "channels", "text_tokens"):
            if getattr(self, name) < 1 and not (name == "block_count" and self.block_count == 0):
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % 2 != 0:
            raise ConfigurationError(f"model_dim must be even for the time embedding, got {self.model_dim}")
        if self.model_dim % self.heads != 0:
            raise ConfigurationError(f"heads {self.heads} must divide model_dim {self.model_dim}")
        if self.model_dim % self.se_reduction != 0:
            raise ConfigurationError(
                f"se_reduction {self.se_reduction} must divide model_dim {self.model_dim}"
            )
        if self.image_height % self.patch != 0 or self.image_width % self.patch != 0:
            raise ConfigurationError(
                f"patch {self.patch} must divide image {self.image_height}x{self.image_width}"
            )
        if self.grid_height % self.window != 0 or self.grid_width % self.window != 0:
            raise ConfigurationError(
                f"window {self.window} must divide token grid {self.grid_height}x{self.grid_width}"
            )
        return self

    @property
    def grid_height(self):
        return self.image_height // self.patch

    @property
    def grid_width(self):
        return self.image_width // self.patch

    @property
    def token_count(self):
        return self.grid_height * self.grid_width

    @property
    def latent_dim(self):
        return self.channels * self.patch * self.patch

    def with_variant(self, variant):
        return replace(self, variant=variant)

    def to_text(self):
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        field_map = {f.name: f for f in fields(cls)}
        seen = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"malformed config line {line!r}")
            key, value = line.split("=", 1)
            if key not in field_map:
                raise ContractError(f"unknown config field {key!r}")
            ftype = field_map[key].type
            if ftype == "bool" or ftype is bool:
                seen[key] = value == "true"
            elif ftype == "int" or ftype is int:
                seen[key] = int(value)
            elif ftype == "float" or ftype is float:
                seen[key] = float(value)
            else:
                seen[key] = value
        missing = sorted(set(field_map) - set(seen))
        if missing:
            raise ContractError(f"config text missing fields: {missing}")
        return cls(**seen).validate()


class DenseRouter(Module):
    """D -> E projection over mean-pooled tokens; zero-init gives uniform gates."""

    def __init__(self, dim, groups=4, rng=None, zero_init=True):
        self.proj = Linear(dim, groups, rng=rng, zero_init=zero_init)


class SparseRouter(Module):
    """D -> N projection over mean-pooled tokens feeding top-k selection."""

    def __init__(self, dim, n_experts, rng=None, zero_init=True):
        self.proj = Linear(dim, n_experts, rng=rng, zero_init=zero_init)


def _pooled_logits(x, router):
    pooled = T.tensor_mean(x.tokens, axis=0, keepdims=True)
    logits = router.proj(pooled)
    return T.reshape(logits, (logits.shape[1],))


def dense_route(x, router):
    """Simplex gate vector over the expert groups."""
    return T.softmax(_pooled_logits(x, router), axis=0)


def _sparse_route_full(x, router, k):
    probs = T.softmax(_pooled_logits(x, router), axis=0)
    indices, _ = T.topk(probs, k)
    selected = T.gather(probs, indices)
    gates = selected / T.tensor_sum(selected)
    return indices, gates, probs


def sparse_route(x, router, k):
    """Top-k indices (lowest-index tie-break) and renormalized gates.

    The gates are softmax values of the selected logits renormalized to sum
    to one, so gradient flows only through the selected entries; with k = N
    the renormalization is the identity and the weighting equals dense
    softmax routing.
    """
    indices, gates, _ = _sparse_route_full(x, router, k)
    return indices, gates


def moe_layer(x, experts, gates):
    """Generic mixture: sum of per-expert outputs weighted by scalar gates."""
    if gates.data.ndim != 1 or gates.shape[0] != len(experts):
        raise ConfigurationError(
            f"gate vector of shape {gates.shape} does not match {len(experts)} experts"
        )
    if np.any(gates.data < 0):
        raise ParameterError("moe_layer gates must be nonnegative")
    out = None
    for i, expert in enumerate(experts):
        weighted = expert(x) * T.gather(gates, [i])
        out = weighted if out is None else out + weighted
    return out


@dataclass
class RoutingTrace:
    """Per-sample routing record: dense gates plus per-group sparse selections."""

    label: str | None
    dense_gates: tuple
    selections: tuple  # per group: tuple of selected sub-expert indices
    sparse_gates: tuple | None = None  # per group: tuple of renormalized gates
    block_index: int = 0

    def to_line(self):
        label = self.label if self.label is not None else "unknown"
        gates = ", ".join(f"{g:.17g}" for g in self.dense_gates)
        pairs = " ".join(
            f"{group}:{sub}" for group, subs in enumerate(self.selections) for sub in subs
        )
        return f"{label}, {gates}, {pairs}"

    @classmethod
    def from_line(cls, line, group_count=4):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != group_count + 2:
            raise ContractError(f"malformed routing trace line {line!r}")
        label = parts[0]
        gates = tuple(float(p) for p in parts[1 : 1 + group_count])
        selections = [[] for _ in range(group_count)]
        if parts[-1]:
            for pair in parts[-1].split():
                group, sub = pair.split(":")
                selections[int(group)].append(int(sub))
        return cls(
            label=label if label != "unknown" else None,
            dense_gates=gates,
            selections=tuple(tuple(s) for s in selections),
        )


class ExpertGroup(Module):
    """N sub-experts of one mechanism plus an intra-group router.

    intra_mode 'sparse' evaluates only the top-k sub-experts, 'dense'
    evaluates all N with softmax gates, 'none' is the single fixed expert of
    the no_intra ablation (no router parameters at all).
    """

    def __init__(
        self,
        mechanism,
        dim,
        n_experts,
        top_k,
        rng,
        *,
        heads=1,
        se_reduction=4,
        window=2,
        shift=0,
        intra_mode="sparse",
        router_init="zero",
    ):
        if mechanism not in GROUP_ORDER:
            raise ConfigurationError(f"unknown mechanism {mechanism!r}")
        if intra_mode not in ("sparse", "dense", "none"):
            raise ConfigurationError(f"unknown intra_mode {intra_mode!r}")
        if intra_mode == "none":
            n_experts = 1
            top_k = 1
        if not 1 <= top_k <= n_experts:
            raise ConfigurationError(f"top_k {top_k} out of range for {n_experts} sub-experts")
        self.mechanism = mechanism
        self.intra_mode = intra_mode
        self.top_k = top_k
        self.window = window
        self.shift = shift
        self.experts = [self._make_params(dim, rng, heads, se_reduction) for _ in range(n_experts)]
        self.router = (
            SparseRouter(dim, n_experts, rng=rng, zero_init=router_init == "zero")
            if intra_mode != "none"
            else None
        )

    def _make_params(self, dim, rng, heads, se_reduction):
        if self.mechanism == "channel":
            return ChannelAttentionParams(dim, rng, heads=heads)
        if self.mechanism == "se":
            return SEParams(dim, rng, reduction=se_reduction)
        return AttentionParams(dim, rng, heads=heads)

    @property
    def n_experts(self):
        return len(self.experts)

    def evaluate_expert(self, index, x):
        p = self.experts[index]
        if self.mechanism == "spatial":
            return spatial_self_attention(x, p)
        if self.mechanism == "channel":
            return channel_self_attention(x, p)
        if self.mechanism == "swin":
            return swin_attention(x, p, self.window, self.shift)
        return se_attention(x, p)

    def forward(self, x):
        """Returns (output tokens, selected (index, gate float) pairs, full probs or None)."""
        if self.intra_mode == "none":
            return self.evaluate_expert(0, x).tokens, [(0, 1.0)], None
        if self.intra_mode == "dense":
            probs = T.softmax(_pooled_logits(x, self.router), axis=0)
            out = None
            selections = []
            for j in range(self.n_experts):
                weighted = self.evaluate_expert(j, x).tokens * T.gather(probs, [j])
                out = weighted if out is None else out + weighted
                selections.append((j, float(probs.data[j])))
            return out, selections, probs
        indices, gates, probs = _sparse_route_full(x, self.router, self.top_k)
        out = None
        selections = []
        for pos, j in enumerate(indices):
            weighted = self.evaluate_expert(j, x).tokens * T.gather(gates, [pos])
            out = weighted if out is None else out + weighted
            selections.append((j, float(gates.data[pos])))
        return out, selections, probs


def intra_moe_forward(x, group, k=None):
    """Sparse intra-group mixture; only selected sub-experts are evaluated."""
    if k is not None and k != group.top_k:
        group = _with_top_k(group, k)
    out, _, _ = group.forward(x)
    return x.with_tokens(out)


def _with_top_k(group, k):
    if not 1 <= k <= group.n_experts:
        raise ParameterError(f"top_k {k} out of range for {group.n_experts} sub-experts")
    clone = ExpertGroup.__new__(ExpertGroup)
    clone.__dict__.update(group.__dict__)
    clone.top_k = k
    return clone


def mim_forward(
    x,
    groups,
    dense_router,
    trace_sink=None,
    *,
    inter_mode="dense",
    top_k=2,
    residual=True,
    label=None,
    aux_sink=None,
    block_index=0,
):
    """Dense (or top-k sparse) fusion of the four intra-MoE group outputs.

    y = sum_i g_i * F_i(x), plus a residual from x when enabled. Appends a
    RoutingTrace to trace_sink and, when aux_sink is given, the full softmax
    probability tensors for balance-penalty accounting.
    """
    n_groups = len(groups)
    if inter_mode == "dense":
        gates = dense_route(x, dense_router)
        active = list(range(n_groups))
        weights = [T.gather(gates, [i]) for i in active]
        dense_vec = [float(g) for g in gates.data]
        if aux_sink is not None:
            aux_sink.append((block_index, -1, gates))
    elif inter_mode == "sparse":
        k = min(top_k, n_groups)
        indices, gates, probs = _sparse_route_full(x, dense_router, k)
        active = indices
        weights = [T.gather(gates, [pos]) for pos in range(len(indices))]
        dense_vec = [0.0] * n_groups
        for pos, i in enumerate(indices):
            dense_vec[i] = float(gates.data[pos])
        if aux_sink is not None:
            aux_sink.append((block_index, -1, probs))
    else:
        raise ConfigurationError(f"unknown inter_mode {inter_mode!r}")

    out = None
    selections = [() for _ in range(n_groups)]
    sparse_gates = [() for _ in range(n_groups)]
    for weight, i in zip(weights, active):
        group_out, sel, probs = groups[i].forward(x)
        if probs is not None and aux_sink is not None:
            aux_sink.append((block_index, i, probs))
        selections[i] = tuple(j for j, _ in sel)
        sparse_gates[i] = tuple(g for _, g in sel)
        weighted = group_out * weight
        out = weighted if out is None else out + weighted
    if residual:
        out = out + x.tokens
    if trace_sink is not None:
        trace_sink.append(
            RoutingTrace(
                label=label,
                dense_gates=tuple(dense_vec),
                selections=tuple(selections),
                sparse_gates=tuple(sparse_gates),
                block_index=block_index,
            )
        )
    return x.with_tokens(out)


class MiM(Module):
    """One MoE-in-MoE layer: four expert groups under a dense (or sparse) fusion router."""

    def __init__(self, config, rng, *, block_index=0, router_init="zero"):
        config.validate()
        mechanism = _SINGLE_MECHANISM_VARIANTS.get(config.variant)
        mechanisms = (mechanism,) * 4 if mechanism else GROUP_ORDER
        intra_mode = "none" if config.variant == "no_intra" else (
            "dense" if config.variant == "sparse_inter_dense_intra" else "sparse"
        )
        self.inter_mode = "sparse" if config.variant.startswith("sparse_inter") else "dense"
        shift = 0 if block_index % 2 == 0 else config.window // 2
        self.groups = [
            ExpertGroup(
                mech,
                config.model_dim,
                config.sub_expert_count,
                config.top_k,
                rng,
                heads=config.heads,
                se_reduction=config.se_reduction,
                window=config.window,
                shift=shift,
                intra_mode=intra_mode,
                router_init=router_init,
            )
            for mech in mechanisms
        ]
        self.dense_router = DenseRouter(config.model_dim, len(mechanisms), rng=rng, zero_init=router_init == "zero")
        self.top_k = config.top_k
        self.residual = config.mim_residual
        self.block_index = block_index

    def forward(self, x, trace_sink=None, label=None, aux_sink=None):
        if x.dim != self.dense_router.proj.in_dim:
            raise DimensionError(
                f"token dim {x.dim} does not match router dim {self.dense_router.proj.in_dim}"
            )
        return mim_forward(
            x,
            self.groups,
            self.dense_router,
            trace_sink,
            inter_mode=self.inter_mode,
            top_k=self.top_k,
            residual=self.residual,
            label=label,
            aux_sink=aux_sink,
            block_index=self.block_index,
        )
