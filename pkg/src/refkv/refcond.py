"""Denoising U-net and the four ways of feeding it reference latents.

``cachekv``
    Each reference latent, zero-padded on the LQ channels, goes through the
    U-net once with a t=0 embedding.  Every self-attention layer records its
    keys and values; the main denoising passes append those tokens after their
    own keys/values.  Queries never come from cached tokens.
``spatial-concat``
    Each reference, zero-padded on the LQ channels, becomes a tile next to the
    main input.  Tiles are convolved and normalized separately and meet in
    every self-attention layer, where each tile attends over the tokens of
    all tiles, as if they sat side by side in one image.  The output is read
    back at the main tile only.
``channel-concat``
    Reference latents (padded to ``max_refs``) enter through an extra input
    convolution whose output is added to the main input convolution, which is
    the same map as concatenating them on the channel axis.
``cross-attention``
    A cross-attention layer after every self-attention layer takes its keys
    and values from the raw encoder-space reference latents.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import Conv2d, GroupNorm, Linear, Module, Rng, Tensor, ops
from .tensorcore.nn import shape_only

MECHANISMS = ("channel-concat", "cross-attention", "spatial-concat", "cachekv")


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 4
    latent_size: int = 8
    base_channels: int = 32
    channel_mult: tuple = (1, 2)
    num_res_blocks: int = 1
    attention_resolutions: tuple = (4,)
    timestep_embed_dim: int = 128
    mechanism: str = "cachekv"
    heads: int = 1
    groups: int = 8
    max_refs: int = 5

    @property
    def in_channels(self):
        return 2 * self.latent_channels

    @property
    def out_channels(self):
        return self.latent_channels

    def resolutions(self):
        return [self.latent_size >> i for i in range(len(self.channel_mult))]

    def validate(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        if not self.channel_mult or any(int(m) < 1 for m in self.channel_mult):
            raise ValueError(f"invalid multiplier ladder {self.channel_mult}")
        if self.latent_size % (1 << (len(self.channel_mult) - 1)):
            raise ValueError(f"latent_size {self.latent_size} cannot be halved {len(self.channel_mult) - 1} times")
        bad = set(self.attention_resolutions) - set(self.resolutions())
        if bad:
            raise ValueError(f"attention_resolutions {sorted(bad)} not produced by ladder {self.resolutions()}")
        for m in self.channel_mult:
            if (self.base_channels * m) % self.heads:
                raise ValueError(f"{self.base_channels * m} channels not divisible by {self.heads} heads")
        return self


DESK_UNET = UNetConfig()
FULL_UNET = UNetConfig(
    latent_channels=8, latent_size=64, base_channels=160, channel_mult=(1, 2, 2, 4), num_res_blocks=2,
    attention_resolutions=(32, 16, 8), timestep_embed_dim=640,
)


# ---------------------------------------------------------------- instrumentation


@dataclass
class Counters:
    """Per-model tallies, summed over batch items.

    ``unet_passes`` counts one per batch item per forward, and one per
    reference during cache extraction.  The attention units count query and
    key tokens of main (non-extraction) passes, summed over attention layers.
    """

    unet_passes: int = 0
    null_cache_passes: int = 0
    attention_token_units: int = 0
    attention_key_units: int = 0
    flops_estimate: int = 0

    def reset(self):
        for k in vars(self):
            setattr(self, k, 0)

    def as_dict(self):
        return dict(vars(self))

    def report(self):
        return "".join(f"{k}\t{v}\n" for k, v in self.as_dict().items())


# ---------------------------------------------------------------- cache


@dataclass
class KVCache:
    """Per-layer (keys, values) of shape (N, ref_count * tokens, D)."""

    entries: dict
    ref_count: int
    source_checksum: str
    tokens_per_ref: dict = field(default_factory=dict)

    def entry(self, layer_id):
        return self.entries[layer_id]

    def token_count(self, layer_id):
        return self.entries[layer_id][0].shape[1]

    @staticmethod
    def concat_batch(a: "KVCache", b: "KVCache") -> "KVCache":
        if a.entries.keys() != b.entries.keys():
            raise ValueError("caches come from different models")
        entries = {}
        for lid in a.entries:
            ka, va = a.entries[lid]
            kb, vb = b.entries[lid]
            if ka.shape[1:] != kb.shape[1:]:
                raise ValueError(f"layer {lid}: token blocks {ka.shape} vs {kb.shape} cannot share a batch")
            entries[lid] = (ops.concat([ka, kb], 0), ops.concat([va, vb], 0))
        return KVCache(entries, a.ref_count, a.source_checksum + "+" + b.source_checksum, dict(a.tokens_per_ref))


def latent_checksum(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float32).tobytes()).hexdigest()[:16]


class _Ctx:
    __slots__ = ("mode", "cache", "recorded", "ref_tokens", "counters", "tiles")

    def __init__(self, mode="plain", cache=None, ref_tokens=None, counters=None, tiles=1):
        self.mode = mode
        self.tiles = tiles
        self.cache = cache
        self.recorded = {}
        self.ref_tokens = ref_tokens
        self.counters = counters


# ---------------------------------------------------------------- blocks


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps, (N,) -> (N, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(np.float32)


class ResBlock(Module):
    def __init__(self, cin, cout, temb, groups, rng: Rng):
        self.norm1 = GroupNorm(cin, groups)
        self.conv1 = Conv2d(cin, cout, 3, rng.child(1))
        self.temb_proj = Linear(temb, cout, rng.child(2))
        self.norm2 = GroupNorm(cout, groups)
        self.conv2 = Conv2d(cout, cout, 3, rng.child(3))
        self.skip = Conv2d(cin, cout, 1, rng.child(4)) if cin != cout else None

    def __call__(self, x, emb):
        h = self.conv1(ops.silu(self.norm1(x)))
        h = ops.add_channel_vector(h, self.temb_proj(ops.silu(emb)))
        h = self.conv2(ops.silu(self.norm2(h)))
        return ops.add(self.skip(x) if self.skip is not None else x, h)


def _split_heads(x, heads):
    if heads == 1:
        return x
    n, t, d = x.shape
    x = ops.transpose(ops.reshape(x, (n, t, heads, d // heads)), (0, 2, 1, 3))
    return ops.reshape(x, (n * heads, t, d // heads))


def _merge_heads(x, heads):
    if heads == 1:
        return x
    nh, t, dh = x.shape
    n = nh // heads
    x = ops.transpose(ops.reshape(x, (n, heads, t, dh)), (0, 2, 1, 3))
    return ops.reshape(x, (n, t, heads * dh))


class AttnBlock(Module):
    """Single- or multi-head self-attention over spatial tokens."""

    def __init__(self, ch, groups, heads, layer_id, rng: Rng):
        self.layer_id = layer_id
        self.heads = heads
        self.dim = ch
        self.norm = GroupNorm(ch, groups)
        self.q = Linear(ch, ch, rng.child(1))
        self.k = Linear(ch, ch, rng.child(2))
        self.v = Linear(ch, ch, rng.child(3))
        self.proj = Linear(ch, ch, rng.child(4))

    def qkv(self, tokens):
        return self.q(tokens), self.k(tokens), self.v(tokens)

    def attend(self, q, k, v):
        h = self.heads
        return _merge_heads(ops.scaled_dot_attention(_split_heads(q, h), _split_heads(k, h), _split_heads(v, h)), h)

    def __call__(self, x, ctx: _Ctx):
        n, c, hh, ww = x.shape
        tokens = ops.nchw_to_tokens(self.norm(x))
        if ctx.mode == "cache":
            out = attend_with_cache(self, tokens, ctx.cache.entry(self.layer_id))
        elif ctx.mode == "tiles":
            # every tile of a sample attends over the tokens of all its tiles
            g = ctx.tiles
            joint = ops.reshape(tokens, (n // g, g * hh * ww, c))
            q, k, v = self.qkv(joint)
            out = ops.reshape(self.attend(q, k, v), (n, hh * ww, c))
        else:
            q, k, v = self.qkv(tokens)
            if ctx.mode == "record":
                ctx.recorded[self.layer_id] = (k, v)
            out = self.attend(q, k, v)
        if ctx.counters is not None:
            # per sample: query tokens, and keys including cached or tiled ones
            samples = n // ctx.tiles
            ctx.counters.attention_token_units += samples * ctx.tiles * hh * ww
            extra = ctx.cache.token_count(self.layer_id) if ctx.mode == "cache" else 0
            ctx.counters.attention_key_units += samples * (ctx.tiles * hh * ww + extra)
        return ops.add(x, ops.tokens_to_nchw(self.proj(out), hh, ww))


def attend_with_cache(layer: AttnBlock, main_tokens, cache_entry):
    """Attention of the main tokens over [main K; cached K] and [main V; cached V]."""
    k_ref, v_ref = cache_entry
    if k_ref.shape[-1] != layer.dim or v_ref.shape != k_ref.shape:
        raise ValueError(f"cache entry {k_ref.shape} does not fit layer {layer.layer_id} with D={layer.dim}")
    if k_ref.shape[0] != main_tokens.shape[0]:
        raise ValueError(f"cache batch {k_ref.shape[0]} vs main batch {main_tokens.shape[0]}")
    q, k, v = layer.qkv(main_tokens)
    if k_ref.shape[1]:
        k = ops.concat([k, k_ref], axis=1)
        v = ops.concat([v, v_ref], axis=1)
    return layer.attend(q, k, v)


class CrossAttnBlock(Module):
    def __init__(self, ch, cz, groups, heads, rng: Rng):
        self.heads = heads
        self.norm = GroupNorm(ch, groups)
        self.q = Linear(ch, ch, rng.child(1))
        self.k = Linear(cz, ch, rng.child(2))
        self.v = Linear(cz, ch, rng.child(3))
        self.proj = Linear(ch, ch, rng.child(4))

    def __call__(self, x, ctx: _Ctx):
        n, c, hh, ww = x.shape
        q = self.q(ops.nchw_to_tokens(self.norm(x)))
        k, v = self.k(ctx.ref_tokens), self.v(ctx.ref_tokens)
        h = self.heads
        out = _merge_heads(ops.scaled_dot_attention(_split_heads(q, h), _split_heads(k, h), _split_heads(v, h)), h)
        return ops.add(x, ops.tokens_to_nchw(self.proj(out), hh, ww))


class Stage(Module):
    """Residual block, optionally followed by self- and cross-attention."""

    def __init__(self, res, attn=None, cross=None):
        self.res = res
        self.attn = attn
        self.cross = cross

    def __call__(self, x, emb, ctx):
        x = self.res(x, emb)
        if self.attn is not None:
            x = self.attn(x, ctx)
            if self.cross is not None:
                x = self.cross(x, ctx)
        return x


class Downsample(Module):
    def __init__(self, ch, rng):
        self.conv = Conv2d(ch, ch, 3, rng, stride=2, pad=1)

    def __call__(self, x):
        return self.conv(x)


class Upsample(Module):
    def __init__(self, ch, rng):
        self.conv = Conv2d(ch, ch, 3, rng)

    def __call__(self, x):
        return self.conv(ops.upsample_nearest(x, 2))


# ---------------------------------------------------------------- model


class UNet(Module):
    def __init__(self, config: UNetConfig, rng: Rng):
        cfg = config.validate()
        self.config = cfg
        self.mechanism = cfg.mechanism
        self.counters = Counters()
        self.weights_version = 0
        self._null_cache = {}
        ch = cfg.base_channels
        temb = cfg.timestep_embed_dim
        g, heads = cfg.groups, cfg.heads
        cross = cfg.mechanism == "cross-attention"
        self.attn_layers = []
        seq = iter(range(10**6))

        def attn_stage(res_block, cur, res):
            if res not in cfg.attention_resolutions:
                return Stage(res_block)
            a = AttnBlock(cur, g, heads, len(self.attn_layers), rng.child(next(seq)))
            self.attn_layers.append(a)
            c = CrossAttnBlock(cur, cfg.latent_channels, g, heads, rng.child(next(seq))) if cross else None
            return Stage(res_block, a, c)

        self.temb1 = Linear(ch, temb, rng.child(next(seq)))
        self.temb2 = Linear(temb, temb, rng.child(next(seq)))
        self.conv_in = Conv2d(cfg.in_channels, ch, 3, rng.child(next(seq)))
        if cfg.mechanism == "channel-concat":
            self.conv_ref = Conv2d(cfg.max_refs * cfg.latent_channels, ch, 3, rng.child(next(seq)))

        skips = [ch]
        cur = ch
        res = cfg.latent_size
        self.down = []
        last = len(cfg.channel_mult) - 1
        for lvl, mult in enumerate(cfg.channel_mult):
            for _ in range(cfg.num_res_blocks):
                block = ResBlock(cur, ch * mult, temb, g, rng.child(next(seq)))
                cur = ch * mult
                self.down.append(attn_stage(block, cur, res))
                skips.append(cur)
            if lvl != last:
                self.down.append(Downsample(cur, rng.child(next(seq))))
                res //= 2
                skips.append(cur)

        self.mid1 = ResBlock(cur, cur, temb, g, rng.child(next(seq)))
        self.mid_attn = self.mid_cross = None
        if res in cfg.attention_resolutions:
            self.mid_attn = AttnBlock(cur, g, heads, len(self.attn_layers), rng.child(next(seq)))
            self.attn_layers.append(self.mid_attn)
            if cross:
                self.mid_cross = CrossAttnBlock(cur, cfg.latent_channels, g, heads, rng.child(next(seq)))
        self.mid2 = ResBlock(cur, cur, temb, g, rng.child(next(seq)))

        self.up = []
        for lvl in reversed(range(len(cfg.channel_mult))):
            mult = cfg.channel_mult[lvl]
            for _ in range(cfg.num_res_blocks + 1):
                block = ResBlock(cur + skips.pop(), ch * mult, temb, g, rng.child(next(seq)))
                cur = ch * mult
                self.up.append(attn_stage(block, cur, res))
            if lvl != 0:
                self.up.append(Upsample(cur, rng.child(next(seq))))
                res *= 2

        self.norm_out = GroupNorm(cur, g)
        self.conv_out = Conv2d(cur, cfg.out_channels, 3, rng.child(next(seq)))

    # -- body ---------------------------------------------------------

    def _body(self, x, t, ctx, stem=None):
        emb = Tensor(timestep_embedding(t, self.config.base_channels))
        emb = self.temb2(ops.silu(self.temb1(emb)))
        h = self.conv_in(x) if stem is None else stem
        hs = [h]
        for mod in self.down:
            h = mod(h, emb, ctx) if isinstance(mod, Stage) else mod(h)
            hs.append(h)
        h = self.mid1(h, emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, ctx)
            if self.mid_cross is not None:
                h = self.mid_cross(h, ctx)
        h = self.mid2(h, emb)
        for mod in self.up:
            if isinstance(mod, Stage):
                h = mod(ops.concat([h, hs.pop()], axis=1), emb, ctx)
            else:
                h = mod(h)
        return self.conv_out(ops.silu(self.norm_out(h)))

    def _count_pass(self, n, flops_before):
        self.counters.unet_passes += n
        self.counters.flops_estimate += ops.FLOPS["count"] - flops_before

    # -- public -------------------------------------------------------

    def __call__(self, z_t, z_lq, t, cond):
        return self.forward(z_t, z_lq, t, cond)

    def forward(self, z_t, z_lq, t, cond):
        """Predict the clean latent from ``z_t`` given the LQ latent and references.

        ``cond`` is a :class:`KVCache` for ``cachekv`` and a reference-latent
        tensor (N, R, Cz, H, W) for every other mechanism.
        """
        cfg = self.config
        if z_t.shape != z_lq.shape or z_t.ndim != 4 or z_t.shape[1] != cfg.latent_channels:
            raise ValueError(f"z_t {z_t.shape} and z_LQ {z_lq.shape} must both be (N, {cfg.latent_channels}, H, W)")
        n, cz, hh, ww = z_t.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        before = ops.FLOPS["count"]
        x = ops.concat([z_t, z_lq], axis=1)
        if self.mechanism == "cachekv":
            if not isinstance(cond, KVCache):
                raise TypeError("cachekv model expects a KVCache condition")
            out = self._body(x, t, _Ctx("cache", cache=cond, counters=self.counters))
        else:
            if isinstance(cond, KVCache) or not isinstance(cond, Tensor):
                raise TypeError(f"{self.mechanism} model expects a reference-latent tensor, got {type(cond).__name__}")
            if cond.ndim != 5 or cond.shape[0] != n or cond.shape[2:] != z_t.shape[1:]:
                raise ValueError(f"reference latents must be (N, R, {cz}, {hh}, {ww}), got {cond.shape}")
            r = cond.shape[1]
            if self.mechanism == "channel-concat":
                out = self._channel_forward(x, cond, t)
            elif self.mechanism == "cross-attention":
                toks = ops.nchw_to_tokens(ops.reshape(ops.transpose(cond, (0, 2, 1, 3, 4)), (n, cz, r * hh, ww)))
                out = self._body(x, t, _Ctx("plain", ref_tokens=toks, counters=self.counters))
            else:
                # tiles share only self-attention; convolutions and norms stay per tile
                zero = Tensor(np.zeros((n, 1, cz, hh, ww), dtype=np.float32))
                refs_in = ops.concat([cond, ops.concat([zero] * r, axis=1)], axis=2) if r else None
                main = ops.reshape(x, (n, 1, 2 * cz, hh, ww))
                canvas = ops.concat([main, refs_in], axis=1) if r else main
                g = 1 + r
                flat = ops.reshape(canvas, (n * g, 2 * cz, hh, ww))
                body = self._body(flat, np.repeat(t, g), _Ctx("tiles", counters=self.counters, tiles=g))
                out = ops.reshape(ops.slice_axis(ops.reshape(body, (n, g, cz, hh, ww)), 1, 0, 1), (n, cz, hh, ww))
        self._count_pass(n, before)
        return out

    def _channel_forward(self, x, refs, t):
        cfg = self.config
        n, r, cz, hh, ww = refs.shape
        if r > cfg.max_refs:
            raise ValueError(f"channel-concat takes at most {cfg.max_refs} references, got {r}")
        flat = ops.reshape(refs, (n, r * cz, hh, ww))
        if r < cfg.max_refs:
            pad = Tensor(np.zeros((n, (cfg.max_refs - r) * cz, hh, ww), dtype=np.float32))
            flat = ops.concat([flat, pad], axis=1)
        stem = ops.add(self.conv_in(x), self.conv_ref(flat))
        return self._body(x, t, _Ctx("plain", counters=self.counters), stem=stem)

    def bump_version(self):
        """Call after a parameter update; drops the memoized null cache."""
        self.weights_version += 1
        self._null_cache.clear()


def extract_cachekv(model: UNet, ref_latents, count=True) -> KVCache:
    """Run each reference once at t=0 and collect per-layer K, V token blocks.

    ``ref_latents`` is a list of (N, Cz, H, W) tensors (one per reference) or a
    single (N, R, Cz, H, W) tensor.  Token blocks are ordered by reference.
    """
    if model.mechanism != "cachekv":
        raise ValueError(f"extract_cachekv needs a cachekv model, not {model.mechanism}")
    if isinstance(ref_latents, Tensor):
        refs = ref_latents
        if refs.ndim == 4:
            refs = ops.reshape(refs, (1,) + refs.shape)
    else:
        refs = list(ref_latents)
        if not refs:
            raise ValueError("extract_cachekv: empty reference list")
        refs = [r if r.ndim == 4 else ops.reshape(r, (1,) + r.shape) for r in refs]
        refs = ops.concat([ops.reshape(r, (r.shape[0], 1) + r.shape[1:]) for r in refs], axis=1)
    n, r, cz, hh, ww = refs.shape
    if r == 0:
        raise ValueError("extract_cachekv: empty reference list")
    cfg = model.config
    if cz != cfg.latent_channels:
        raise ValueError(f"reference latents have {cz} channels, model expects {cfg.latent_channels}")
    flat = ops.reshape(refs, (n * r, cz, hh, ww))
    x = ops.concat([flat, Tensor(np.zeros((n * r, cz, hh, ww), dtype=np.float32))], axis=1)
    before = ops.FLOPS["count"]
    ctx = _Ctx("record", counters=None)
    model._body(x, np.zeros(n * r, dtype=np.int64), ctx)
    if count:
        model.counters.unet_passes += n * r
        model.counters.flops_estimate += ops.FLOPS["count"] - before
    entries, per_ref = {}, {}
    for lid, (k, v) in ctx.recorded.items():
        _, tok, d = k.shape
        entries[lid] = (ops.reshape(k, (n, r * tok, d)), ops.reshape(v, (n, r * tok, d)))
        per_ref[lid] = tok
    return KVCache(entries, r, latent_checksum(refs.data), per_ref)


def null_cache(model: UNet, n, ref_count) -> KVCache:
    """Cache of ``ref_count`` zero references for ``n`` samples.

    Zero references all give the same tokens, so one extraction pass is run per
    weights version and tiled; it is tallied under ``null_cache_passes``.
    """
    key = ref_count
    if key not in model._null_cache:
        zero = Tensor(np.zeros((1, 1, model.config.latent_channels, model.config.latent_size, model.config.latent_size),
                               dtype=np.float32))
        model._null_cache[key] = extract_cachekv(model, zero, count=False)
        model.counters.null_cache_passes += 1
    one = model._null_cache[key]
    entries = {}
    for lid, (k, v) in one.entries.items():
        kd = np.tile(k.data, (n, ref_count, 1))
        vd = np.tile(v.data, (n, ref_count, 1))
        entries[lid] = (Tensor(kd), Tensor(vd))
    return KVCache(entries, ref_count, "null", dict(one.tokens_per_ref))


def prepare_condition(model: UNet, ref_latents: Tensor, count=True):
    """Reference latents (N, R, Cz, H, W) -> whatever ``model.forward`` takes."""
    if model.mechanism == "cachekv":
        return extract_cachekv(model, ref_latents, count=count)
    return ref_latents


def null_condition(model: UNet, n, ref_count):
    if model.mechanism == "cachekv":
        return null_cache(model, n, ref_count)
    cfg = model.config
    return Tensor(np.zeros((n, ref_count, cfg.latent_channels, cfg.latent_size, cfg.latent_size), dtype=np.float32))


def concat_conditions(a, b):
    if isinstance(a, KVCache):
        return KVCache.concat_batch(a, b)
    return ops.concat([a, b], axis=0)


def build_model(config: UNetConfig, rng: Rng | int = 0, materialize=True) -> UNet:
    """Seeded model; weights ~ N(0, 1/fan_in), biases and norm shifts zero.

    ``materialize=False`` allocates untouched zero buffers, enough to count
    parameters of presets too large to initialize.
    """
    rng = rng if isinstance(rng, Rng) else Rng(rng)
    if materialize:
        return UNet(config, rng)
    with shape_only():
        return UNet(config, rng)
