"""Vision transformer backbone for single-channel images.

Architecture, per block (pre-norm residual):

    Z'  = Z  + out_proj(LN(multi_head_attention(LN(Z))))-style path where the
          concatenated head outputs are layer-normalized before the output
          projection (an extra inner LN that stabilizes deep training)
    Z'' = Z' + W_out . LN(SiLU(W_gate x) * W_value x)   (gated FFN with an
          LN on the hidden activations)

Queries and keys get a two-axis rotary position encoding on top of learned
absolute position embeddings: the first half of each head's dims rotates
with the token's grid row, the second half with its column, in consecutive
2-dim pairs with frequencies theta^(-2k/(d_head/2)). The class token (when
enabled) bypasses rotation, is never masked, and is excluded from pooling.

The patch embedding is a linear map on flattened patch pixels; the final
layer norm is applied to all tokens; classification features are the mean
over image tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Var
from .errors import ConfigError, IntegrityError, ShapeError
from .rng import STREAM_INIT, RngStream, stream_root

PRESETS: dict[str, tuple[int, int, int]] = {
    # name: (dim, depth, heads)
    "ti": (192, 12, 3),
    "s": (384, 12, 6),
    "b": (768, 12, 12),
    "micro": (64, 2, 2),
}


def swiglu_hidden(dim: int) -> int:
    """Smallest multiple of 8 at or above 8*dim/3."""
    raw = (8 * dim + 2) // 3  # ceil(8d/3)
    return ((raw + 7) // 8) * 8


@dataclass(frozen=True)
class ViTConfig:
    dim: int
    depth: int
    heads: int
    patch: int = 16
    grid: int = 14  # grid the positional table is stored at
    in_channels: int = 1
    use_class_token: bool = True
    ln_eps: float = 1e-6
    rope_theta: float = 10000.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 4:
            raise ConfigError(
                f"head dim {self.dim // self.heads} must be a multiple of 4 "
                "(two-axis rotary pairs)"
            )
        if min(self.dim, self.depth, self.heads, self.patch, self.grid, self.in_channels) < 1:
            raise ConfigError("all backbone dimensions must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def ffn_hidden(self) -> int:
        return swiglu_hidden(self.dim)

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


def preset_config(name: str, grid: int = 14, **overrides) -> ViTConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    dim, depth, heads = PRESETS[name]
    return ViTConfig(dim=dim, depth=depth, heads=heads, grid=grid, **overrides)


@lru_cache(maxsize=32)
def rope_tables(gh: int, gw: int, head_dim: int, theta: float, with_cls: bool):
    """cos/sin tables [N, head_dim/2] for a gh x gw token grid.

    Pair k < head_dim/4 rotates by row * theta^(-2k/(head_dim/2)); the
    remaining pairs rotate by column with the same frequency ladder. A
    leading zero-angle row is prepended for the class token.
    """
    quarter = head_dim // 4
    freqs = theta ** (-2.0 * np.arange(quarter) / (head_dim / 2.0))
    rows = np.repeat(np.arange(gh), gw).astype(np.float64)
    cols = np.tile(np.arange(gw), gh).astype(np.float64)
    angles = np.concatenate(
        [rows[:, None] * freqs[None, :], cols[:, None] * freqs[None, :]], axis=1
    )
    if with_cls:
        angles = np.concatenate([np.zeros((1, angles.shape[1])), angles], axis=0)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


@dataclass
class ForwardRecord:
    """Optional capture of intermediates for interpretability."""

    attn: list[Var] = field(default_factory=list)  # per block, [B, H, N, N] post-softmax
    pre_final: Var | None = None  # last block output before the final LN


def _trunc_normal(gen: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within two standard deviations."""
    out = gen.standard_normal(shape)
    while True:
        bad = np.abs(out) > 2.0
        if not bad.any():
            break
        out[bad] = gen.standard_normal(int(bad.sum()))
    return (out * std).astype(np.float32)


class ViT:
    def __init__(self, config: ViTConfig, params: dict[str, Param]):
        self.config = config
        self.params = params

    # -- construction -------------------------------------------------------

    @staticmethod
    def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
        d, h = config.dim, config.ffn_hidden
        shapes: dict[str, tuple[int, ...]] = {
            "patch_embed.w": (config.patch * config.patch * config.in_channels, d),
            "patch_embed.b": (d,),
            "pos_embed": (config.n_patches, d),
            "mask_token": (1, d),
        }
        if config.use_class_token:
            shapes["cls_token"] = (1, d)
            shapes["pos_embed_cls"] = (1, d)
        for i in range(config.depth):
            p = f"blocks.{i}."
            shapes.update(
                {
                    p + "attn.norm.g": (d,),
                    p + "attn.norm.b": (d,),
                    p + "attn.q.w": (d, d),
                    p + "attn.q.b": (d,),
                    p + "attn.k.w": (d, d),
                    p + "attn.k.b": (d,),
                    p + "attn.v.w": (d, d),
                    p + "attn.v.b": (d,),
                    p + "attn.sub_norm.g": (d,),
                    p + "attn.sub_norm.b": (d,),
                    p + "attn.out.w": (d, d),
                    p + "attn.out.b": (d,),
                    p + "ffn.norm.g": (d,),
                    p + "ffn.norm.b": (d,),
                    p + "ffn.gate.w": (d, h),
                    p + "ffn.gate.b": (h,),
                    p + "ffn.value.w": (d, h),
                    p + "ffn.value.b": (h,),
                    p + "ffn.hidden_norm.g": (h,),
                    p + "ffn.hidden_norm.b": (h,),
                    p + "ffn.out.w": (h, d),
                    p + "ffn.out.b": (d,),
                }
            )
        shapes["final_norm.g"] = (d,)
        shapes["final_norm.b"] = (d,)
        return shapes

    @staticmethod
    def init_param(name: str, shape, stream: RngStream) -> np.ndarray:
        """Initial value for one parameter, keyed by name only."""
        base = name.split(".")[-1]
        if base in ("g",):
            return np.ones(shape, np.float32)
        if base in ("b",) or name.endswith(".b"):
            return np.zeros(shape, np.float32)
        return _trunc_normal(stream.child(name).generator(), shape, std=0.02)

    @staticmethod
    def build(config: ViTConfig, seed: int) -> "ViT":
        stream = stream_root(seed, STREAM_INIT)
        params = {
            name: Param(ViT.init_param(name, shape, stream), name)
            for name, shape in ViT.param_shapes(config).items()
        }
        return ViT(config, params)

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    # -- forward ------------------------------------------------------------

    def _patchify(self, images: Var) -> tuple[Var, int]:
        b, c, hh, ww = images.shape
        cfg = self.config
        if c != cfg.in_channels:
            raise ShapeError(f"expected {cfg.in_channels}-channel input, got {c}")
        if hh % cfg.patch or ww % cfg.patch or hh != ww:
            raise ShapeError(
                f"input {hh}x{ww} must be square and divisible by patch {cfg.patch}"
            )
        g = hh // cfg.patch
        x = ad.reshape(images, (b, c, g, cfg.patch, g, cfg.patch))
        x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
        return ad.reshape(x, (b, g * g, c * cfg.patch * cfg.patch)), g

    def _pos_for_grid(self, g: int) -> Var:
        cfg = self.config
        pos = self.params["pos_embed"]
        if g == cfg.grid:
            return pos
        # stored table is for cfg.grid; resample bilinearly (differentiable)
        x = ad.reshape(pos, (cfg.grid, cfg.grid, cfg.dim))
        x = ad.transpose(x, (2, 0, 1))
        x = ad.bilinear_resize_2d(x, g, g)
        x = ad.transpose(x, (1, 2, 0))
        return ad.reshape(x, (g * g, cfg.dim))

    def _attention(self, x: Var, i: int, rope_cs, record: ForwardRecord | None) -> Var:
        cfg = self.config
        p = self.params
        pre = f"blocks.{i}.attn."
        b, n, d = x.shape
        h, hd = cfg.heads, cfg.head_dim
        normed = ad.layer_norm(x, p[pre + "norm.g"], p[pre + "norm.b"], cfg.ln_eps)

        def heads_of(t):
            t = ad.reshape(t, (b, n, h, hd))
            return ad.transpose(t, (0, 2, 1, 3))  # [B, H, N, hd]

        cos, sin = rope_cs
        q = ad.rope_rotate(heads_of(ad.linear(normed, p[pre + "q.w"], p[pre + "q.b"])), cos, sin)
        k = ad.rope_rotate(heads_of(ad.linear(normed, p[pre + "k.w"], p[pre + "k.b"])), cos, sin)
        v = heads_of(ad.linear(normed, p[pre + "v.w"], p[pre + "v.b"]))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = ad.softmax(scores)
        if record is not None:
            record.attn.append(attn)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        ctx = ad.layer_norm(ctx, p[pre + "sub_norm.g"], p[pre + "sub_norm.b"], cfg.ln_eps)
        return ad.linear(ctx, p[pre + "out.w"], p[pre + "out.b"])

    def _ffn(self, x: Var, i: int) -> Var:
        cfg = self.config
        p = self.params
        pre = f"blocks.{i}.ffn."
        normed = ad.layer_norm(x, p[pre + "norm.g"], p[pre + "norm.b"], cfg.ln_eps)
        gate = ad.silu(ad.linear(normed, p[pre + "gate.w"], p[pre + "gate.b"]))
        value = ad.linear(normed, p[pre + "value.w"], p[pre + "value.b"])
        hidden = ad.layer_norm(
            ad.mul(gate, value), p[pre + "hidden_norm.g"], p[pre + "hidden_norm.b"], cfg.ln_eps
        )
        return ad.linear(hidden, p[pre + "out.w"], p[pre + "out.b"])

    def embed(self, images, mask: np.ndarray | None = None) -> tuple[Var, int]:
        """Token sequence entering block 0, plus the token grid side g.

        mask, when given, is a boolean [B, n_patches] plan: masked slots are
        replaced by the shared mask token before position embeddings are
        added, so a masked slot carries mask_token + pos_embed and nothing
        of the original patch. The class token is never maskable.
        """
        cfg = self.config
        images = images if isinstance(images, Var) else Var(np.asarray(images, np.float32))
        tok, g = self._patchify(images)
        tok = ad.linear(tok, self.params["patch_embed.w"], self.params["patch_embed.b"])
        b, n, d = tok.shape

        if mask is not None:
            if mask.shape != (b, n) or mask.dtype != bool:
                raise ShapeError(f"mask must be bool [{b}, {n}], got {mask.shape} {mask.dtype}")
            keep = Var((~mask).astype(np.float32)[:, :, None])
            fill = Var(mask.astype(np.float32)[:, :, None])
            mask_tok = ad.reshape(self.params["mask_token"], (1, 1, d))
            tok = ad.add(ad.mul(tok, keep), ad.mul(mask_tok, fill))

        x = ad.add(tok, ad.reshape(self._pos_for_grid(g), (1, n, d)))

        if cfg.use_class_token:
            cls_row = ad.add(self.params["cls_token"], self.params["pos_embed_cls"])
            cls_b = ad.add(ad.reshape(cls_row, (1, 1, d)), Var(np.zeros((b, 1, 1), np.float32)))
            x = ad.concat([cls_b, x], axis=1)
        return x, g

    def forward_features(
        self,
        images,
        mask: np.ndarray | None = None,
        record: ForwardRecord | None = None,
    ) -> Var:
        """Token features [B, N(+1 with class token), dim] after the final LN."""
        cfg = self.config
        x, g = self.embed(images, mask=mask)
        cos, sin = rope_tables(g, g, cfg.head_dim, cfg.rope_theta, cfg.use_class_token)
        for i in range(cfg.depth):
            x = ad.add(x, self._attention(x, i, (cos, sin), record))
            x = ad.add(x, self._ffn(x, i))

        if record is not None:
            record.pre_final = x
        return ad.layer_norm(x, self.params["final_norm.g"], self.params["final_norm.b"], cfg.ln_eps)

    def image_tokens(self, tokens: Var) -> Var:
        """Drop the class token (if any) from a token tensor."""
        if not self.config.use_class_token:
            return tokens
        b, n, d = tokens.shape
        return ad.slice_(tokens, (None, (1, n), None))

    def pooled(self, tokens: Var) -> Var:
        """Mean over image tokens only; the class token never participates."""
        return ad.mean(self.image_tokens(tokens), axis=1)

    def token_grid(self, tokens: Var, g: int) -> Var:
        """Image tokens as a [B, dim, g, g] feature map."""
        imgs = self.image_tokens(tokens)
        b, n, d = imgs.shape
        if n != g * g:
            raise ShapeError(f"{n} tokens do not form a {g}x{g} grid")
        return ad.transpose(ad.reshape(imgs, (b, g, g, d)), (0, 3, 1, 2))


# -- checkpoint plumbing ----------------------------------------------------


def vit_meta(config: ViTConfig) -> dict:
    return asdict(config)


def vit_from_parts(tensors: dict[str, np.ndarray], meta: dict, prefix: str = "vit.") -> ViT:
    """Rebuild a backbone from checkpoint tensors under a name prefix."""
    try:
        config = ViTConfig(**meta)
    except TypeError as exc:
        raise IntegrityError(f"bad backbone config in checkpoint: {exc}") from exc
    params = {}
    for name, shape in ViT.param_shapes(config).items():
        key = prefix + name
        if key not in tensors:
            raise IntegrityError(f"checkpoint missing backbone tensor '{key}'")
        value = tensors[key]
        if tuple(value.shape) != tuple(shape):
            raise IntegrityError(
                f"backbone tensor '{key}' has shape {value.shape}, expected {shape}"
            )
        # copy: optimizer steps mutate Param values in place, and the caller's
        # tensor dict (often a loaded checkpoint) must stay pristine
        params[name] = Param(value.copy(), name)
    return ViT(config, params)


def vit_to_tensors(model: ViT, prefix: str = "vit.") -> dict[str, np.ndarray]:
    return {prefix + name: p.value for name, p in model.params.items()}
