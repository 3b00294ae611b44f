"""Interactive Fourier Transformer between a frozen image encoder and a frozen LM."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, normal_param
from .spectral import MixerKind, fourier_mix, is_power_of_two

__all__ = [
    "ModelConfig",
    "FrozenImageEncoder",
    "FrozenLM",
    "SharedLayer",
    "ImageLayer",
    "InteractiveFourierTransformer",
    "BitaModel",
    "build_prefix_causal_mask",
    "count_params",
    "PAD_ID",
]

PAD_ID = 0


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    num_prompts: int = 32
    image_feat_dim: int = 64
    image_patches: int = 16
    image_size: int = 32
    enc_layers: int = 2
    enc_heads: int = 4
    lm_dim: int = 128
    lm_layers: int = 2
    lm_heads: int = 4
    lm_max_positions: int = 128
    vocab_size: int = 32
    max_text_len: int = 16
    mixer: MixerKind = MixerKind.FOURIER
    seed: int = 0
    frozen_seed: int = 1234

    def __post_init__(self):
        self.mixer = MixerKind.parse(self.mixer)
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            if f.name in ("mixer", "seed", "frozen_seed"):
                continue
            if int(getattr(self, f.name)) <= 0:
                raise ValueError(f"config field {f.name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.lm_dim % self.lm_heads:
            raise ValueError(f"lm_dim {self.lm_dim} not divisible by lm_heads {self.lm_heads}")
        if self.image_feat_dim % self.enc_heads:
            raise ValueError("image_feat_dim not divisible by enc_heads")
        side = math.isqrt(self.image_patches)
        if side * side != self.image_patches or self.image_size % side:
            raise ValueError(
                f"image_patches {self.image_patches} must be a square grid dividing image_size {self.image_size}"
            )
        if self.mixer is MixerKind.FOURIER:
            for name in ("hidden_dim", "num_prompts", "max_text_len"):
                if not is_power_of_two(getattr(self, name)):
                    raise ValueError(f"{name} must be a power of two for the Fourier mixer")

    @property
    def patch_size(self) -> int:
        return self.image_size // math.isqrt(self.image_patches)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mixer"] = self.mixer.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                continue
            kwargs[k] = v if k == "mixer" else int(v)
        return cls(**kwargs)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# ------------------------------------------------------------------ masks


def build_prefix_causal_mask(num_prefix: int, num_text: int) -> np.ndarray:
    """Boolean [(P+T) x (P+T)] attention permission matrix.

    Prefix rows see the whole prefix (and nothing else); text row i sees the
    whole prefix plus text positions up to and including itself.
    """
    if num_prefix < 0 or num_text < 0:
        raise ValueError("prefix and text lengths must be non-negative")
    n = num_prefix + num_text
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return (j < num_prefix) | ((i >= num_prefix) & (j <= i))


# ------------------------------------------------------------ frozen parts


class _EncoderBlock(Module):
    def __init__(self, seed: int, name: str, d: int, heads: int):
        self.ln1 = LayerNorm(f"{name}.ln1", d, eps=1e-5, trainable=False)
        self.attn = MultiHeadAttention(seed, f"{name}.attn", d, d, d, heads,
                                       std=0.02, trainable=False)
        self.ln2 = LayerNorm(f"{name}.ln2", d, eps=1e-5, trainable=False)
        self.mlp = FeedForward(seed, f"{name}.mlp", d, 4 * d, std=0.02, trainable=False)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h))
        return ad.add(x, self.mlp(self.ln2(x)))


class FrozenImageEncoder(Module):
    """Seeded stand-in for a large pre-trained vision encoder.

    Patchify, linear patch embedding plus positions, then pre-norm
    transformer blocks.  The final layer norm is omitted, so features are
    taken from the residual stream as it leaves the last block.
    """

    def __init__(self, cfg: ModelConfig):
        s, d = cfg.frozen_seed, cfg.image_feat_dim
        patch_dim = 3 * cfg.patch_size**2
        self.patch_embed = Linear(s, "encoder.patch_embed", patch_dim, d,
                                  std=1.0 / math.sqrt(patch_dim), trainable=False)
        self.pos = normal_param(s, "encoder.pos", (cfg.image_patches, d), 0.02, trainable=False)
        self.blocks = [_EncoderBlock(s, f"encoder.blocks.{i}", d, cfg.enc_heads)
                       for i in range(cfg.enc_layers)]
        self._cfg = cfg

    def patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self._cfg
        b = images.shape[0]
        g, p = cfg.image_size // cfg.patch_size, cfg.patch_size
        x = images.reshape(b, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * 3)

    def __call__(self, images) -> Tensor:
        """Encode ``[H, W, 3]`` or ``[B, H, W, 3]`` images into patch features."""
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        size = self._cfg.image_size
        if images.ndim != 4 or images.shape[1:] != (size, size, 3):
            raise ShapeError(f"expected images of shape [{size}, {size}, 3], got {images.shape[-3:]}")
        with ad.no_grad():
            x = self.patch_embed(Tensor(self.patchify(images) - 0.5))
            x = ad.add(x, self.pos)
            for block in self.blocks:
                x = block(x)
        return Tensor(x.data[0] if single else x.data)


class _LMBlock(Module):
    def __init__(self, seed: int, name: str, d: int, heads: int, n_layers: int):
        std = 1.0 / math.sqrt(d)
        out_std = std / math.sqrt(2 * n_layers)
        self.ln1 = LayerNorm(f"{name}.ln1", d, eps=1e-5, trainable=False)
        self.attn = MultiHeadAttention(seed, f"{name}.attn", d, d, d, heads,
                                       std=std, out_std=out_std, trainable=False)
        self.ln2 = LayerNorm(f"{name}.ln2", d, eps=1e-5, trainable=False)
        self.mlp = FeedForward(seed, f"{name}.mlp", d, 4 * d, std=std,
                               out_std=out_std / 2, trainable=False)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h, mask))
        return ad.add(x, self.mlp(self.ln2(x)))


class FrozenLM(Module):
    """Seeded decoder-only language model with tied input/output embeddings."""

    def __init__(self, cfg: ModelConfig):
        s, d = cfg.frozen_seed, cfg.lm_dim
        # unit-norm embedding rows keep the tied output head from simply echoing
        # the current token, so the prefix can steer the residual stream
        std = 1.0 / math.sqrt(d)
        self.tok_embed = normal_param(s, "lm.tok_embed", (cfg.vocab_size, d), std, trainable=False)
        self.pos_embed = normal_param(s, "lm.pos_embed", (cfg.lm_max_positions, d), std,
                                      trainable=False)
        self.blocks = [_LMBlock(s, f"lm.blocks.{i}", d, cfg.lm_heads, cfg.lm_layers)
                       for i in range(cfg.lm_layers)]
        self.ln_f = LayerNorm("lm.ln_f", d, eps=1e-5, trainable=False)
        self._cfg = cfg

    def embed_tokens(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self._cfg.vocab_size):
            raise IndexError(f"token id out of range for vocabulary of size {self._cfg.vocab_size}")
        return ad.embedding(self.tok_embed, ids)

    def forward_embeddings(self, prefix: Tensor, text_embeds: Tensor, mask: np.ndarray) -> Tensor:
        """Logits for the text rows given already-embedded text tokens."""
        b, p, d = prefix.shape
        t = text_embeds.shape[1]
        if mask.shape != (p + t, p + t):
            raise ShapeError(f"mask shape {mask.shape} does not match prefix {p} + text {t}")
        if p + t > self._cfg.lm_max_positions:
            raise ShapeError(f"sequence of {p + t} exceeds {self._cfg.lm_max_positions} positions")
        x = ad.concat([prefix, text_embeds], axis=1)
        x = ad.add(x, ad.getitem(self.pos_embed, slice(0, p + t)))
        for block in self.blocks:
            x = block(x, mask)
        h = self.ln_f(ad.getitem(x, (slice(None), slice(p, p + t))))
        return ad.matmul(h, ad.transpose(self.tok_embed, (1, 0)))

    def __call__(self, prefix: Tensor, token_ids, mask: np.ndarray) -> Tensor:
        return lm_forward(self, prefix, token_ids, mask)


def lm_forward(lm: FrozenLM, prefix: Tensor, token_ids, mask: np.ndarray) -> Tensor:
    """Run the frozen LM over ``[prefix ; embed(tokens)]`` under ``mask``.

    Accepts an unbatched ``[P, lm_dim]`` prefix with ``[T]`` ids (returns
    ``[T, vocab]``) or the batched forms.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    single = prefix.ndim == 2
    if single:
        prefix = ad.reshape(prefix, (1,) + prefix.shape)
        ids = ids[None]
    if ids.shape[0] != prefix.shape[0]:
        raise ShapeError(f"prefix batch {prefix.shape[0]} != token batch {ids.shape[0]}")
    if prefix.shape[-1] != lm.tok_embed.shape[1]:
        raise ShapeError(f"prefix width {prefix.shape[-1]} != LM width {lm.tok_embed.shape[1]}")
    logits = lm.forward_embeddings(prefix, lm.embed_tokens(ids), mask)
    if single:
        logits = ad.reshape(logits, logits.shape[1:])
    return logits


# ----------------------------------------------------------------- the IFT


class SharedLayer(Module):
    """Parameters one IFT layer shares between the image and text branches."""

    def __init__(self, cfg: ModelConfig, i: int):
        s, d = cfg.seed, cfg.hidden_dim
        self.ln_mix = LayerNorm(f"ift.layers.{i}.ln_mix", d)
        if cfg.mixer is MixerKind.SELF_ATTENTION:
            self.self_attn = MultiHeadAttention(s, f"ift.layers.{i}.self_attn", d, d, d, cfg.num_heads)
        self.ffn = FeedForward(s, f"ift.layers.{i}.ffn", d, 4 * d)
        self.ln_ffn = LayerNorm(f"ift.layers.{i}.ln_ffn", d)
        self._mixer = cfg.mixer

    def mix(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        if self._mixer is MixerKind.FOURIER:
            return fourier_mix(x)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        return self.self_attn(x, x, mask)

    def feed_forward(self, x: Tensor) -> Tensor:
        return self.ln_ffn(ad.add(x, self.ffn(x)))


class ImageLayer(Module):
    def __init__(self, cfg: ModelConfig, i: int, shared: SharedLayer):
        d = cfg.hidden_dim
        self.shared = shared
        self.cross_attn = MultiHeadAttention(cfg.seed, f"ift.image.{i}.cross_attn",
                                             d, cfg.image_feat_dim, d, cfg.num_heads)
        self.ln_cross = LayerNorm(f"ift.image.{i}.ln_cross", d)

    def __call__(self, p: Tensor, feats: Tensor) -> Tensor:
        u = self.shared.ln_mix(ad.add(p, self.shared.mix(p)))
        v = self.ln_cross(ad.add(u, self.cross_attn(u, feats)))
        return self.shared.feed_forward(v)


class TextLayer(Module):
    def __init__(self, shared: SharedLayer):
        self.shared = shared

    def __call__(self, t: Tensor, key_mask: np.ndarray) -> Tensor:
        u = self.shared.ln_mix(ad.add(t, self.shared.mix(t, key_mask)))
        return self.shared.feed_forward(u)


class InteractiveFourierTransformer(Module):
    """Dual-branch bridge: prompt/image branch with cross-attention and a text branch.

    Layer ``i`` of both branches holds the same :class:`SharedLayer`.
    """

    def __init__(self, cfg: ModelConfig):
        s, d = cfg.seed, cfg.hidden_dim
        self.prompts = normal_param(s, "ift.prompts", (cfg.num_prompts, d), 0.02)
        self.word_embed = normal_param(s, "ift.word_embed", (cfg.vocab_size, d), 0.02)
        self.pos_embed = normal_param(s, "ift.pos_embed", (cfg.max_text_len, d), 0.02)
        self.ln_embed = LayerNorm("ift.ln_embed", d)
        self.shared = [SharedLayer(cfg, i) for i in range(cfg.num_layers)]
        self.image_layers = [ImageLayer(cfg, i, self.shared[i]) for i in range(cfg.num_layers)]
        self.text_layers = [TextLayer(self.shared[i]) for i in range(cfg.num_layers)]
        self._cfg = cfg

    def image_branch(self, feats: Tensor) -> Tensor:
        """Visual prompt outputs ``[B, num_prompts, d]`` for ``[B, N, f]`` features."""
        single = feats.ndim == 2
        if single:
            feats = ad.reshape(feats, (1,) + feats.shape)
        if feats.shape[-1] != self._cfg.image_feat_dim:
            raise ShapeError(f"image features width {feats.shape[-1]} != {self._cfg.image_feat_dim}")
        b = feats.shape[0]
        p = ad.expand(self.prompts, (b,) + self.prompts.shape)
        for layer in self.image_layers:
            p = layer(p, feats)
        return ad.reshape(p, p.shape[1:]) if single else p

    def text_branch(self, token_ids) -> Tensor:
        """Token features ``[B, T, d]``; row 0 of each sequence is the [CLS] output."""
        ids = np.asarray(token_ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        b, t = ids.shape
        if t > self._cfg.max_text_len:
            raise ShapeError(f"text length {t} exceeds max_text_len {self._cfg.max_text_len}")
        if self._cfg.mixer is MixerKind.FOURIER and not is_power_of_two(t):
            raise ShapeError(f"text length {t} must be a power of two for the Fourier mixer")
        if ids.size and (ids.min() < 0 or ids.max() >= self._cfg.vocab_size):
            raise IndexError(f"token id out of range for vocabulary of size {self._cfg.vocab_size}")
        x = ad.add(ad.embedding(self.word_embed, ids), ad.getitem(self.pos_embed, slice(0, t)))
        x = self.ln_embed(x)
        key_mask = ids != PAD_ID
        for layer in self.text_layers:
            x = layer(x, key_mask)
        return ad.reshape(x, x.shape[1:]) if single else x


# ------------------------------------------------------------ full pipeline


class BitaModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.encoder = FrozenImageEncoder(cfg)
        self.ift = InteractiveFourierTransformer(cfg)
        self.proj = Linear(cfg.seed, "proj", cfg.hidden_dim, cfg.lm_dim)
        self.lm = FrozenLM(cfg)
        self.config = cfg

    # frozen / trainable views ------------------------------------------
    def frozen_parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.named_parameters("encoder."), **self.lm.named_parameters("lm.")}

    def trainable_parameters(self, stage: str = "all") -> dict[str, Tensor]:
        """Parameters updated in ``stage`` ("s1", "s2", "ft" or "all")."""
        ift = self.ift.named_parameters("ift.")
        proj = self.proj.named_parameters("proj.")
        if stage == "s1":
            return dict(ift)
        if stage in ("s2", "ft"):
            text_only = ("ift.word_embed", "ift.pos_embed", "ift.ln_embed.")
            image_path = {k: v for k, v in ift.items() if not k.startswith(text_only)}
            return {**image_path, **proj}
        if stage == "all":
            return {**ift, **proj}
        raise ValueError(f"unknown stage {stage!r}")

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.frozen_parameters().items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    # forward pieces ----------------------------------------------------
    def image_encode(self, images) -> Tensor:
        return self.encoder(images)

    def visual_prompts(self, images) -> Tensor:
        return self.ift.image_branch(self.encoder(images))

    def text_features(self, token_ids) -> Tensor:
        return self.ift.text_branch(token_ids)

    def project_to_lm(self, z_hat: Tensor) -> Tensor:
        if z_hat.shape[-1] != self.config.hidden_dim:
            raise ShapeError(f"prompt width {z_hat.shape[-1]} != hidden_dim {self.config.hidden_dim}")
        return self.proj(z_hat)

    def lm_forward(self, prefix: Tensor, token_ids, mask: np.ndarray) -> Tensor:
        return lm_forward(self.lm, prefix, token_ids, mask)

    def caption_logits(self, images, lm_input_ids) -> Tensor:
        prefix = self.project_to_lm(self.visual_prompts(images))
        ids = np.asarray(lm_input_ids)
        mask = build_prefix_causal_mask(prefix.shape[-2], ids.shape[-1])
        return self.lm_forward(prefix, ids, mask)


def count_params(model: BitaModel, trainable_only: bool = False) -> dict[str, int]:
    """Exact parameter counts per component, with ``total`` summed at the end."""
    ift = model.ift
    counts = {
        "visual_prompts": ift.prompts.size,
        "text_embeddings": ift.word_embed.size + ift.pos_embed.size + ift.ln_embed.num_parameters(),
        "shared_layers": sum(layer.num_parameters() for layer in ift.shared),
        "cross_attention": sum(layer.cross_attn.num_parameters() + layer.ln_cross.num_parameters()
                               for layer in ift.image_layers),
        "projection": model.proj.num_parameters(),
    }
    if not trainable_only:
        counts["image_encoder"] = model.encoder.num_parameters()
        counts["language_model"] = model.lm.num_parameters()
    counts["total"] = sum(counts.values())
    return counts
