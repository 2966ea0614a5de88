"""Cross-attention-mixer fusion over per-subject modality embeddings.

Inputs are fixed-size batches of S subjects, each carrying one embedding of
width C per modality (padded rows flagged invalid). The full network:

1. a unified view is generated by concatenating both modality embeddings,
   passing them through one mixer layer and projecting 2C -> C;
2. each view (structural, functional, unified) is reshaped per subject into
   T tokens, projected to ``model_dim`` and run through its own multi-head
   self-attention encoder (attention is strictly per subject);
3. six cross-attention layers (ordered query/key-source, value-source pairs
   over the three views; two layers when the unified branch is off) share
   the value stream of the other view and keep a residual from the
   query/key source;
4. cross outputs are mean-pooled over tokens, grouped by query/key source,
   concatenated and run through one mixer layer per group, giving the three
   view features; their concatenation passes a final mixer to give the
   fused feature;
5. one linear head per view feature plus one for the fused feature emit
   two logits each.

Mixer layers mix across subjects (token axis) and then across channels,
exactly mirroring the residual MLP form with GELU and pre-layernorm on each
branch. Because subjects mix, padded rows are re-zeroed before every mixer
call and excluded from every loss.

Concatenation order is (structural, functional, unified) everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import glorot
from .errors import ConfigError, DataError, ShapeError
from .persist import load_named_tensors, save_named_tensors

VIEW_ORDER = ("sc", "fnc", "uni")


def cross_pairs(unified: bool) -> list:
    """Ordered (query/key-source, value-source) pairs."""
    views = VIEW_ORDER if unified else VIEW_ORDER[:2]
    return [(qk, v) for qk in views for v in views if v != qk]


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class MixerParams:
    token_in: ad.Tensor  # (token_hidden, S)
    token_out: ad.Tensor  # (S, token_hidden)
    channel_in: ad.Tensor  # (channel_hidden, C)
    channel_out: ad.Tensor  # (C, channel_hidden)
    ln_channel_gain: ad.Tensor  # (C,)
    ln_channel_bias: ad.Tensor
    ln_subject_gain: ad.Tensor  # (S,)
    ln_subject_bias: ad.Tensor

    def named(self, prefix: str) -> dict:
        return {
            f"{prefix}.token_in": self.token_in,
            f"{prefix}.token_out": self.token_out,
            f"{prefix}.channel_in": self.channel_in,
            f"{prefix}.channel_out": self.channel_out,
            f"{prefix}.ln_channel_gain": self.ln_channel_gain,
            f"{prefix}.ln_channel_bias": self.ln_channel_bias,
            f"{prefix}.ln_subject_gain": self.ln_subject_gain,
            f"{prefix}.ln_subject_bias": self.ln_subject_bias,
        }


def init_mixer(rng: np.random.Generator, subjects: int, channels: int) -> MixerParams:
    token_hidden = 2 * subjects
    channel_hidden = 2 * channels
    return MixerParams(
        token_in=ad.parameter(glorot(rng, token_hidden, subjects)),
        token_out=ad.parameter(glorot(rng, subjects, token_hidden)),
        channel_in=ad.parameter(glorot(rng, channel_hidden, channels)),
        channel_out=ad.parameter(glorot(rng, channels, channel_hidden)),
        ln_channel_gain=ad.parameter(np.ones(channels)),
        ln_channel_bias=ad.parameter(np.zeros(channels)),
        ln_subject_gain=ad.parameter(np.ones(subjects)),
        ln_subject_bias=ad.parameter(np.zeros(subjects)),
    )


def zero_mixer(subjects: int, channels: int) -> MixerParams:
    """All-zero mixing weights: the layer becomes an exact identity."""
    token_hidden = 2 * subjects
    channel_hidden = 2 * channels
    return MixerParams(
        token_in=ad.parameter(np.zeros((token_hidden, subjects))),
        token_out=ad.parameter(np.zeros((subjects, token_hidden))),
        channel_in=ad.parameter(np.zeros((channel_hidden, channels))),
        channel_out=ad.parameter(np.zeros((channels, channel_hidden))),
        ln_channel_gain=ad.parameter(np.ones(channels)),
        ln_channel_bias=ad.parameter(np.zeros(channels)),
        ln_subject_gain=ad.parameter(np.ones(subjects)),
        ln_subject_bias=ad.parameter(np.zeros(subjects)),
    )


@dataclass
class EncoderParams:
    token_proj: ad.Tensor  # (C/T, d)
    q_heads: list  # each (d, d/h)
    k_heads: list
    v_heads: list
    attn_out_w: ad.Tensor  # (d, d)
    attn_out_b: ad.Tensor  # (d,)
    fc_w: ad.Tensor  # (d, d)
    fc_b: ad.Tensor  # (d,)
    ln1_gain: ad.Tensor
    ln1_bias: ad.Tensor
    ln2_gain: ad.Tensor
    ln2_bias: ad.Tensor

    def named(self, prefix: str) -> dict:
        out = {f"{prefix}.token_proj": self.token_proj}
        for h, (q, k, v) in enumerate(zip(self.q_heads, self.k_heads, self.v_heads)):
            out[f"{prefix}.head{h}.q"] = q
            out[f"{prefix}.head{h}.k"] = k
            out[f"{prefix}.head{h}.v"] = v
        out.update(
            {
                f"{prefix}.attn_out_w": self.attn_out_w,
                f"{prefix}.attn_out_b": self.attn_out_b,
                f"{prefix}.fc_w": self.fc_w,
                f"{prefix}.fc_b": self.fc_b,
                f"{prefix}.ln1_gain": self.ln1_gain,
                f"{prefix}.ln1_bias": self.ln1_bias,
                f"{prefix}.ln2_gain": self.ln2_gain,
                f"{prefix}.ln2_bias": self.ln2_bias,
            }
        )
        return out


def init_encoder(rng, token_dim: int, model_dim: int, heads: int) -> EncoderParams:
    if model_dim % heads != 0:
        raise ConfigError(f"encoder: model_dim {model_dim} not divisible by heads {heads}")
    head_dim = model_dim // heads
    return EncoderParams(
        token_proj=ad.parameter(glorot(rng, token_dim, model_dim)),
        q_heads=[ad.parameter(glorot(rng, model_dim, head_dim)) for _ in range(heads)],
        k_heads=[ad.parameter(glorot(rng, model_dim, head_dim)) for _ in range(heads)],
        v_heads=[ad.parameter(glorot(rng, model_dim, head_dim)) for _ in range(heads)],
        attn_out_w=ad.parameter(glorot(rng, model_dim, model_dim)),
        attn_out_b=ad.parameter(np.zeros(model_dim)),
        fc_w=ad.parameter(glorot(rng, model_dim, model_dim)),
        fc_b=ad.parameter(np.zeros(model_dim)),
        ln1_gain=ad.parameter(np.ones(model_dim)),
        ln1_bias=ad.parameter(np.zeros(model_dim)),
        ln2_gain=ad.parameter(np.ones(model_dim)),
        ln2_bias=ad.parameter(np.zeros(model_dim)),
    )


@dataclass
class CrossAttentionParams:
    q_w: ad.Tensor  # (d, d)
    k_w: ad.Tensor
    v_w: ad.Tensor
    out_w: ad.Tensor
    out_b: ad.Tensor
    ln_gain: ad.Tensor
    ln_bias: ad.Tensor

    def named(self, prefix: str) -> dict:
        return {
            f"{prefix}.q_w": self.q_w,
            f"{prefix}.k_w": self.k_w,
            f"{prefix}.v_w": self.v_w,
            f"{prefix}.out_w": self.out_w,
            f"{prefix}.out_b": self.out_b,
            f"{prefix}.ln_gain": self.ln_gain,
            f"{prefix}.ln_bias": self.ln_bias,
        }


def init_cross_attention(rng, model_dim: int) -> CrossAttentionParams:
    return CrossAttentionParams(
        q_w=ad.parameter(glorot(rng, model_dim, model_dim)),
        k_w=ad.parameter(glorot(rng, model_dim, model_dim)),
        v_w=ad.parameter(glorot(rng, model_dim, model_dim)),
        out_w=ad.parameter(glorot(rng, model_dim, model_dim)),
        out_b=ad.parameter(np.zeros(model_dim)),
        ln_gain=ad.parameter(np.ones(model_dim)),
        ln_bias=ad.parameter(np.zeros(model_dim)),
    )


@dataclass
class UnifiedParams:
    mixer: MixerParams
    fc_w: ad.Tensor  # (2C, C)
    fc_b: ad.Tensor  # (C,)

    def named(self, prefix: str) -> dict:
        out = self.mixer.named(f"{prefix}.mixer")
        out[f"{prefix}.fc_w"] = self.fc_w
        out[f"{prefix}.fc_b"] = self.fc_b
        return out


def init_unified(rng, subjects: int, channels: int) -> UnifiedParams:
    return UnifiedParams(
        mixer=init_mixer(rng, subjects, 2 * channels),
        fc_w=ad.parameter(glorot(rng, 2 * channels, channels)),
        fc_b=ad.parameter(np.zeros(channels)),
    )


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _affine_ln(x: ad.Tensor, gain: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.multiply(ad.layernorm(x), gain), bias)


# Additive attention mask blocking cross-subject token pairs. exp(-1e9)
# underflows to exactly 0.0, so masked weights are exact zeros and subjects
# cannot leak into each other through a batched attention call.
_BLOCK_OFF = -1e9
_block_mask_cache: dict = {}


def _block_mask(subjects: int, tokens: int) -> np.ndarray:
    key = (subjects, tokens)
    if key not in _block_mask_cache:
        eye = np.eye(subjects)
        blocks = np.kron(eye, np.ones((tokens, tokens)))
        _block_mask_cache[key] = (1.0 - blocks) * _BLOCK_OFF
    return _block_mask_cache[key]


def mixer_layer(z: ad.Tensor, p: MixerParams) -> ad.Tensor:
    """Residual token mixing (across subjects) then channel mixing.

    With all four weight matrices zero this is an exact identity.
    """
    if z.shape != (p.token_in.shape[1], p.channel_in.shape[1]):
        raise ShapeError(
            f"mixer_layer: input {z.shape} does not match params "
            f"({p.token_in.shape[1]}, {p.channel_in.shape[1]})"
        )
    normed = _affine_ln(z, p.ln_channel_gain, p.ln_channel_bias)
    token_mixed = ad.matmul(p.token_out, ad.gelu(ad.matmul(p.token_in, normed)))
    a = ad.add(z, token_mixed)

    a_t = ad.transpose(a)
    normed_t = _affine_ln(a_t, p.ln_subject_gain, p.ln_subject_bias)
    channel_mixed = ad.matmul(p.channel_out, ad.gelu(ad.matmul(p.channel_in, normed_t)))
    b = ad.add(a_t, channel_mixed)
    return ad.transpose(b)


def unified_representation(sc: ad.Tensor, fnc: ad.Tensor, p: UnifiedParams) -> ad.Tensor:
    """Concatenate the two modality views, mix once, project back to C."""
    if sc.shape != fnc.shape:
        raise ShapeError(f"unified_representation: {sc.shape} vs {fnc.shape}")
    mixed = mixer_layer(ad.concat([sc, fnc], axis=1), p.mixer)
    return ad.add(ad.matmul(mixed, p.fc_w), p.fc_b)


def scaled_dot_attention(
    q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, additive_mask: np.ndarray | None = None
) -> tuple[ad.Tensor, ad.Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V; returns (output, attention weights).

    ``additive_mask`` is a constant added to the scores before the softmax
    (used to batch independent per-subject blocks into one call).
    """
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: q{q.shape} k{k.shape} v{v.shape} do not conform")
    scale = 1.0 / np.sqrt(q.shape[1])
    scores = ad.multiply(ad.matmul(q, ad.transpose(k)), scale)
    if additive_mask is not None:
        scores = ad.add(scores, ad.constant(additive_mask))
    weights = ad.softmax(scores)
    return ad.matmul(weights, v), weights


def self_attention_encoder(
    tokens: ad.Tensor,
    p: EncoderParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout_p: float = 0.0,
    additive_mask: np.ndarray | None = None,
) -> ad.Tensor:
    """Multi-head self-attention + FCL, both with residual and layernorm."""
    heads = []
    for q_w, k_w, v_w in zip(p.q_heads, p.k_heads, p.v_heads):
        out, _ = scaled_dot_attention(
            ad.matmul(tokens, q_w),
            ad.matmul(tokens, k_w),
            ad.matmul(tokens, v_w),
            additive_mask,
        )
        heads.append(out)
    attn = ad.add(ad.matmul(ad.concat(heads, axis=1), p.attn_out_w), p.attn_out_b)
    x1 = _affine_ln(ad.add(tokens, attn), p.ln1_gain, p.ln1_bias)
    ff = ad.add(ad.matmul(x1, p.fc_w), p.fc_b)
    if train and dropout_p > 0.0:
        ff = ad.dropout(ff, dropout_p, rng, train=True)
    return _affine_ln(ad.add(x1, ff), p.ln2_gain, p.ln2_bias)


def cross_attention(
    qk_tokens: ad.Tensor,
    v_tokens: ad.Tensor,
    p: CrossAttentionParams,
    additive_mask: np.ndarray | None = None,
) -> ad.Tensor:
    """Query and key from one view, value from the other; residual on Q/K side."""
    if qk_tokens.shape != v_tokens.shape:
        raise ShapeError(f"cross_attention: {qk_tokens.shape} vs {v_tokens.shape}")
    out, _ = scaled_dot_attention(
        ad.matmul(qk_tokens, p.q_w),
        ad.matmul(qk_tokens, p.k_w),
        ad.matmul(v_tokens, p.v_w),
        additive_mask,
    )
    proj = ad.add(ad.matmul(out, p.out_w), p.out_b)
    return _affine_ln(ad.add(qk_tokens, proj), p.ln_gain, p.ln_bias)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class FusionBatch:
    """Fixed-size batch of subject embeddings; padded rows have valid=False."""

    sc: np.ndarray  # (S, C)
    fnc: np.ndarray  # (S, C)
    labels: np.ndarray  # (S,) int
    valid: np.ndarray  # (S,) bool


def make_batches(
    sc: np.ndarray,
    fnc: np.ndarray,
    labels,
    batch_size: int,
    order: np.ndarray | None = None,
) -> list:
    """Cut embeddings into fixed-size batches, zero-padding the last one."""
    labels = np.asarray(labels, dtype=np.int64)
    n, width = sc.shape
    if order is None:
        order = np.arange(n)
    batches = []
    for lo in range(0, n, batch_size):
        sel = order[lo : lo + batch_size]
        pad = batch_size - len(sel)
        batch_sc = np.zeros((batch_size, width))
        batch_fnc = np.zeros((batch_size, width))
        batch_labels = np.zeros(batch_size, dtype=np.int64)
        batch_valid = np.zeros(batch_size, dtype=bool)
        batch_sc[: len(sel)] = sc[sel]
        batch_fnc[: len(sel)] = fnc[sel]
        batch_labels[: len(sel)] = labels[sel]
        batch_valid[: len(sel)] = True
        batches.append(
            FusionBatch(sc=batch_sc, fnc=batch_fnc, labels=batch_labels, valid=batch_valid)
        )
    return batches


def _zero_invalid(t: ad.Tensor, valid: np.ndarray) -> ad.Tensor:
    """Pin padded subject rows to zero (used before every mixer call)."""
    if valid.all():
        return t
    mask = np.repeat(valid.astype(t.dtype)[:, None], t.shape[1], axis=1)
    return ad.multiply(t, ad.constant(mask))


# ---------------------------------------------------------------------------
# the full fusion network
# ---------------------------------------------------------------------------


@dataclass
class FusionParams:
    subjects: int
    channels: int
    token_count: int
    model_dim: int
    unified: UnifiedParams | None
    encoders: dict  # view -> EncoderParams
    cross: dict  # (qk_view, v_view) -> CrossAttentionParams
    view_mixers: dict  # view -> MixerParams
    fused_mixer: MixerParams
    heads: dict  # branch ("sc"/"fnc"/"uni"/"fused") -> (w, b)
    dropout: float = 0.0

    @property
    def has_unified(self) -> bool:
        return self.unified is not None

    @property
    def active_views(self) -> tuple:
        return VIEW_ORDER if self.has_unified else VIEW_ORDER[:2]

    def named(self) -> dict:
        out = {}
        if self.unified is not None:
            out.update(self.unified.named("unified"))
        for view in self.active_views:
            out.update(self.encoders[view].named(f"encoder.{view}"))
        for qk, v in cross_pairs(self.has_unified):
            out.update(self.cross[(qk, v)].named(f"cross.{qk}-{v}"))
        for view in self.active_views:
            out.update(self.view_mixers[view].named(f"view_mixer.{view}"))
        out.update(self.fused_mixer.named("fused_mixer"))
        for branch, (w, b) in self.heads.items():
            out[f"head.{branch}.w"] = w
            out[f"head.{branch}.b"] = b
        return out

    def tensors(self) -> list:
        return list(self.named().values())


@dataclass
class FusionOutputs:
    views: dict  # view -> Tensor (S, view width)
    fused: ad.Tensor  # (S, sum of view widths)
    logits: dict  # branch -> Tensor (S, 2)
    unified_input: ad.Tensor | None  # the generated unified view (S, C)


def init_fusion(
    rng: np.random.Generator,
    subjects: int,
    channels: int,
    token_count: int,
    model_dim: int,
    heads: int,
    unified: bool = True,
    dropout: float = 0.0,
) -> FusionParams:
    if channels % token_count != 0:
        raise ConfigError(
            f"fusion: channels {channels} not divisible by token_count {token_count}"
        )
    token_dim = channels // token_count
    views = VIEW_ORDER if unified else VIEW_ORDER[:2]
    group_width = (2 if unified else 1) * model_dim
    fused_width = len(views) * group_width
    unified_params = init_unified(rng, subjects, channels) if unified else None
    encoders = {view: init_encoder(rng, token_dim, model_dim, heads) for view in views}
    cross = {pair: init_cross_attention(rng, model_dim) for pair in cross_pairs(unified)}
    view_mixers = {view: init_mixer(rng, subjects, group_width) for view in views}
    fused_mixer = init_mixer(rng, subjects, fused_width)
    head_params = {}
    for view in views:
        head_params[view] = (
            ad.parameter(glorot(rng, group_width, 2)),
            ad.parameter(np.zeros(2)),
        )
    head_params["fused"] = (
        ad.parameter(glorot(rng, fused_width, 2)),
        ad.parameter(np.zeros(2)),
    )
    return FusionParams(
        subjects=subjects,
        channels=channels,
        token_count=token_count,
        model_dim=model_dim,
        unified=unified_params,
        encoders=encoders,
        cross=cross,
        view_mixers=view_mixers,
        fused_mixer=fused_mixer,
        heads=head_params,
        dropout=dropout,
    )


def _encode_view(
    view_matrix: ad.Tensor,
    p: EncoderParams,
    subjects: int,
    token_count: int,
    train: bool,
    rng,
    dropout_p: float,
) -> ad.Tensor:
    """Encoded tokens for all subjects, stacked as one (S*T, d) tensor.

    Attention stays strictly per subject: a block mask zeroes every
    cross-subject attention weight exactly.
    """
    token_dim = view_matrix.shape[1] // token_count
    tokens = ad.matmul(
        ad.reshape(view_matrix, (subjects * token_count, token_dim)), p.token_proj
    )
    mask = _block_mask(subjects, token_count) if subjects > 1 else None
    return self_attention_encoder(tokens, p, train, rng, dropout_p, additive_mask=mask)


def _pool_tokens(stacked: ad.Tensor, subjects: int, token_count: int) -> ad.Tensor:
    """Mean over each subject's token block: (S*T, d) -> (S, d)."""
    segment = np.repeat(np.arange(subjects), token_count)
    return ad.multiply(ad.scatter_sum(stacked, segment, subjects), 1.0 / token_count)


def connex_forward(
    batch: FusionBatch,
    params: FusionParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> FusionOutputs:
    """Full fusion pass; see the module docstring for the wiring."""
    s_fixed, c_fixed = params.subjects, params.channels
    if batch.sc.shape != (s_fixed, c_fixed) or batch.fnc.shape != (s_fixed, c_fixed):
        raise ShapeError(
            f"connex_forward: batch shape {batch.sc.shape} does not match "
            f"fixed (S, C) = {(s_fixed, c_fixed)}; pad the batch"
        )
    if train and params.dropout > 0.0 and rng is None:
        raise ConfigError("connex_forward: train mode with dropout needs an rng")
    valid = batch.valid
    views_in = {"sc": ad.constant(batch.sc), "fnc": ad.constant(batch.fnc)}
    unified_input = None
    if params.has_unified:
        unified_input = unified_representation(
            _zero_invalid(views_in["sc"], valid),
            _zero_invalid(views_in["fnc"], valid),
            params.unified,
        )
        views_in["uni"] = unified_input

    encoded = {
        view: _encode_view(
            views_in[view],
            params.encoders[view],
            s_fixed,
            params.token_count,
            train,
            rng,
            params.dropout,
        )
        for view in params.active_views
    }

    block = _block_mask(s_fixed, params.token_count) if s_fixed > 1 else None
    cross_out = {}
    for qk, v in cross_pairs(params.has_unified):
        out_tokens = cross_attention(encoded[qk], encoded[v], params.cross[(qk, v)], block)
        cross_out[(qk, v)] = _pool_tokens(out_tokens, s_fixed, params.token_count)

    view_feats = {}
    for qk in params.active_views:
        members = [cross_out[pair] for pair in cross_pairs(params.has_unified) if pair[0] == qk]
        grouped = members[0] if len(members) == 1 else ad.concat(members, axis=1)
        view_feats[qk] = mixer_layer(_zero_invalid(grouped, valid), params.view_mixers[qk])

    fused_in = ad.concat([view_feats[v] for v in params.active_views], axis=1)
    fused = mixer_layer(_zero_invalid(fused_in, valid), params.fused_mixer)

    logits = {}
    for view in params.active_views:
        w, b = params.heads[view]
        logits[view] = ad.add(ad.matmul(view_feats[view], w), b)
    w, b = params.heads["fused"]
    logits["fused"] = ad.add(ad.matmul(fused, w), b)
    return FusionOutputs(views=view_feats, fused=fused, logits=logits, unified_input=unified_input)


# ---------------------------------------------------------------------------
# baseline fusion heads (ablations)
# ---------------------------------------------------------------------------


@dataclass
class ConcatParams:
    """Plain concatenation of views followed by one linear head."""

    subjects: int
    channels: int
    unified: UnifiedParams | None
    fc_w: ad.Tensor
    fc_b: ad.Tensor

    @property
    def has_unified(self) -> bool:
        return self.unified is not None

    def named(self) -> dict:
        out = {} if self.unified is None else self.unified.named("unified")
        out["fc.w"] = self.fc_w
        out["fc.b"] = self.fc_b
        return out

    def tensors(self) -> list:
        return list(self.named().values())


def init_concat(rng, subjects: int, channels: int, unified: bool) -> ConcatParams:
    width = (3 if unified else 2) * channels
    return ConcatParams(
        subjects=subjects,
        channels=channels,
        unified=init_unified(rng, subjects, channels) if unified else None,
        fc_w=ad.parameter(glorot(rng, width, 2)),
        fc_b=ad.parameter(np.zeros(2)),
    )


def concat_forward(batch: FusionBatch, params: ConcatParams, train=False, rng=None) -> ad.Tensor:
    sc = ad.constant(batch.sc)
    fnc = ad.constant(batch.fnc)
    parts = [sc, fnc]
    if params.has_unified:
        valid = batch.valid
        parts.append(
            unified_representation(
                _zero_invalid(sc, valid), _zero_invalid(fnc, valid), params.unified
            )
        )
    stacked = ad.concat(parts, axis=1)
    return ad.add(ad.matmul(stacked, params.fc_w), params.fc_b)


@dataclass
class CrossAttBaselineParams:
    """Vanilla cross-attention: encoders + cross layers, stacked into one FCL."""

    subjects: int
    channels: int
    token_count: int
    model_dim: int
    unified: UnifiedParams | None
    encoders: dict
    cross: dict
    fc_w: ad.Tensor
    fc_b: ad.Tensor
    dropout: float = 0.0

    @property
    def has_unified(self) -> bool:
        return self.unified is not None

    @property
    def active_views(self) -> tuple:
        return VIEW_ORDER if self.has_unified else VIEW_ORDER[:2]

    def named(self) -> dict:
        out = {} if self.unified is None else self.unified.named("unified")
        for view in self.active_views:
            out.update(self.encoders[view].named(f"encoder.{view}"))
        for qk, v in cross_pairs(self.has_unified):
            out.update(self.cross[(qk, v)].named(f"cross.{qk}-{v}"))
        out["fc.w"] = self.fc_w
        out["fc.b"] = self.fc_b
        return out

    def tensors(self) -> list:
        return list(self.named().values())


def init_cross_att_baseline(
    rng, subjects: int, channels: int, token_count: int, model_dim: int, heads: int,
    unified: bool, dropout: float = 0.0,
) -> CrossAttBaselineParams:
    token_dim = channels // token_count
    views = VIEW_ORDER if unified else VIEW_ORDER[:2]
    pairs = cross_pairs(unified)
    return CrossAttBaselineParams(
        subjects=subjects,
        channels=channels,
        token_count=token_count,
        model_dim=model_dim,
        unified=init_unified(rng, subjects, channels) if unified else None,
        encoders={view: init_encoder(rng, token_dim, model_dim, heads) for view in views},
        cross={pair: init_cross_attention(rng, model_dim) for pair in pairs},
        fc_w=ad.parameter(glorot(rng, len(pairs) * model_dim, 2)),
        fc_b=ad.parameter(np.zeros(2)),
        dropout=dropout,
    )


# ---------------------------------------------------------------------------
# fusion checkpoints
# ---------------------------------------------------------------------------


def save_fusion(path, params, variant: str, extra_meta: dict | None = None) -> None:
    """Serialize any fusion variant as named tensors plus geometry metadata."""
    meta = {
        "kind": "fusion",
        "variant": variant,
        "subjects": params.subjects,
        "channels": params.channels,
        "unified": params.has_unified,
        "concat_order": list(VIEW_ORDER),
    }
    if variant in ("connex", "cross_att"):
        meta["token_count"] = params.token_count
        meta["model_dim"] = params.model_dim
        meta["heads"] = len(params.encoders[params.active_views[0]].q_heads)
        meta["dropout"] = params.dropout
    if extra_meta:
        meta.update(extra_meta)
    save_named_tensors(path, {k: t.data for k, t in params.named().items()}, meta)


def load_fusion(path):
    """Load a fusion checkpoint; returns (params, variant, meta)."""
    arrays, meta = load_named_tensors(path)
    if meta.get("kind") != "fusion":
        raise DataError(f"checkpoint {path}: not a fusion checkpoint")
    variant = meta.get("variant")
    rng = np.random.default_rng(0)  # template init; every tensor is overwritten
    subjects = int(meta["subjects"])
    channels = int(meta["channels"])
    unified = bool(meta["unified"])
    if variant == "connex":
        params = init_fusion(
            rng, subjects, channels, int(meta["token_count"]), int(meta["model_dim"]),
            int(meta["heads"]), unified=unified, dropout=float(meta.get("dropout", 0.0)),
        )
    elif variant == "cross_att":
        params = init_cross_att_baseline(
            rng, subjects, channels, int(meta["token_count"]), int(meta["model_dim"]),
            int(meta["heads"]), unified=unified, dropout=float(meta.get("dropout", 0.0)),
        )
    elif variant == "concat":
        params = init_concat(rng, subjects, channels, unified)
    else:
        raise DataError(f"checkpoint {path}: unknown fusion variant {variant!r}")
    named = params.named()
    if set(named) != set(arrays):
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        raise DataError(
            f"checkpoint {path}: tensor names do not match (missing {missing}, extra {extra})"
        )
    for name, tensor in named.items():
        if arrays[name].shape != tensor.data.shape:
            raise DataError(
                f"checkpoint {path}: {name} has shape {arrays[name].shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.assign(arrays[name])
    return params, variant, meta


def cross_att_forward(
    batch: FusionBatch, params: CrossAttBaselineParams, train=False, rng=None
) -> ad.Tensor:
    valid = batch.valid
    views_in = {"sc": ad.constant(batch.sc), "fnc": ad.constant(batch.fnc)}
    if params.has_unified:
        views_in["uni"] = unified_representation(
            _zero_invalid(views_in["sc"], valid),
            _zero_invalid(views_in["fnc"], valid),
            params.unified,
        )
    encoded = {
        view: _encode_view(
            views_in[view],
            params.encoders[view],
            params.subjects,
            params.token_count,
            train,
            rng,
            params.dropout,
        )
        for view in params.active_views
    }
    block = _block_mask(params.subjects, params.token_count) if params.subjects > 1 else None
    stacks = []
    for qk, v in cross_pairs(params.has_unified):
        out_tokens = cross_attention(encoded[qk], encoded[v], params.cross[(qk, v)], block)
        stacks.append(_pool_tokens(out_tokens, params.subjects, params.token_count))
    stacked = ad.concat(stacks, axis=1)
    return ad.add(ad.matmul(stacked, params.fc_w), params.fc_b)
