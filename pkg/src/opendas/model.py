"""Dual-encoder with deep prompt injection.

Both encoders are small pre-norm transformers. Learnable prompt tokens are
appended to the token sequence at the input layer and, up to the configured
prompt depth, the trailing prompt slots are overwritten with fresh per-layer
prompt matrices. Beyond that depth the slots are carried through unchanged.
Every backbone weight is frozen; only the :class:`PromptBank` trains.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, TruncationError, ValidationError

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
SPECIAL_TOKENS = (PAD, UNK, EOS)
TEXT_INIT_PHRASE = "A photo of a"


@dataclass
class EncoderConfig:
    depth: int
    width: int
    heads: int
    patch_size: Optional[int] = None
    context_length: Optional[int] = None
    vocab_size: Optional[int] = None
    mlp_ratio: int = 4

    def validate(self) -> None:
        if self.depth < 1:
            raise ValidationError(f"encoder depth must be >= 1, got {self.depth}")
        if self.width < 1 or self.heads < 1:
            raise ValidationError("encoder width and heads must be positive")
        if self.width % self.heads:
            raise ValidationError(f"width {self.width} not divisible by heads {self.heads}")
        for name in ("patch_size", "context_length", "vocab_size"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValidationError(f"{name} must be positive, got {value}")


@dataclass
class PromptConfig:
    depth_v: int = 1
    depth_t: int = 1
    width_v: int = 8
    width_t: int = 4
    text_init: str = "phrase"
    visual_init: str = "random"
    init_std: float = 0.02

    def validate(self, vision: EncoderConfig, text: EncoderConfig) -> None:
        if not 1 <= self.depth_v <= vision.depth:
            raise ValidationError(
                f"visual prompt depth {self.depth_v} outside [1, {vision.depth}]")
        if not 1 <= self.depth_t <= text.depth:
            raise ValidationError(
                f"text prompt depth {self.depth_t} outside [1, {text.depth}]")
        if self.width_v < 1 or self.width_t < 1:
            raise ValidationError("prompt widths must be >= 1")
        if self.text_init not in ("phrase", "random"):
            raise ValidationError(f"unknown text_init {self.text_init!r}")
        if self.visual_init != "random":
            raise ValidationError(f"unknown visual_init {self.visual_init!r}")


@dataclass
class ModelConfig:
    vision: EncoderConfig = field(
        default_factory=lambda: EncoderConfig(depth=2, width=32, heads=4, patch_size=8))
    text: EncoderConfig = field(
        default_factory=lambda: EncoderConfig(depth=2, width=32, heads=4, context_length=8))
    prompt: PromptConfig = field(default_factory=lambda: PromptConfig(depth_v=2, depth_t=2))
    image_size: int = 32
    embed_dim: int = 32
    logit_scale: float = 100.0
    seed: int = 0

    def validate(self) -> None:
        self.vision.validate()
        self.text.validate()
        if self.vision.patch_size is None:
            raise ValidationError("vision encoder needs a patch_size")
        if self.text.context_length is None:
            raise ValidationError("text encoder needs a context_length")
        if self.image_size % self.vision.patch_size:
            raise ShapeError(
                f"image_size {self.image_size} not divisible by patch {self.vision.patch_size}")
        if self.embed_dim < 1:
            raise ValidationError("embed_dim must be positive")
        if not self.logit_scale > 0:
            raise ValidationError(f"logit_scale must be > 0, got {self.logit_scale}")
        self.prompt.validate(self.vision, self.text)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            vision=EncoderConfig(**d["vision"]),
            text=EncoderConfig(**d["text"]),
            prompt=PromptConfig(**d["prompt"]),
            **{k: v for k, v in d.items() if k not in ("vision", "text", "prompt")},
        )


def count_prompt_params(encoders: tuple[EncoderConfig, EncoderConfig],
                        pc: PromptConfig) -> int:
    """Number of learnable prompt entries: J_v*K_v*d_v + J_t*K_t*d_t."""
    vision, text = encoders
    return (pc.depth_v * pc.width_v * vision.width
            + pc.depth_t * pc.width_t * text.width)


class Tokenizer:
    """Whitespace, lower-cased, word-level tokenizer with an unknown token.

    Ids 0-2 are reserved for ``<pad>``, ``<unk>`` and ``<eos>``.
    """

    def __init__(self, words: Iterable[str]):
        self.itos = list(SPECIAL_TOKENS)
        for w in words:
            if w not in SPECIAL_TOKENS and w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @staticmethod
    def split(text: str) -> list[str]:
        return re.findall(r"\S+", text.lower())

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        words = set(cls.split(TEXT_INIT_PHRASE))
        for t in texts:
            words.update(cls.split(t))
        return cls(sorted(words))

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    def __len__(self) -> int:
        return len(self.itos)

    def encode_words(self, text: str) -> list[int]:
        return [self.stoi.get(w, self.unk_id) for w in self.split(text)]


def tokenize_text(query: str, tokenizer: Tokenizer, context_length: Optional[int] = None,
                  truncate: bool = False) -> list[int]:
    """Token ids for ``query`` followed by the end-of-sequence id.

    ``context_length`` bounds the number of content tokens. Longer queries
    raise :class:`TruncationError` unless ``truncate`` is set.
    """
    if not query or not query.strip():
        raise ValidationError("empty query")
    ids = tokenizer.encode_words(query)
    if context_length is not None and len(ids) > context_length:
        if not truncate:
            raise TruncationError(
                f"query {query!r} has {len(ids)} tokens, context length is {context_length}")
        ids = ids[:context_length]
    return ids + [tokenizer.eos_id]


@dataclass
class TokenSequence:
    """Batched encoder input before prompt injection.

    ``special`` is the [CLS] (vision) or [EOS] (text) embedding, ``content``
    the patch or word embeddings. ``padding_mask`` marks padded content slots.
    """

    kind: str
    special: torch.Tensor            # (B, d)
    content: torch.Tensor            # (B, L, d)
    positions: torch.Tensor          # (L,)
    padding_mask: Optional[torch.Tensor] = None  # (B, L) bool, True = padding

    @property
    def length(self) -> int:
        return 1 + self.content.shape[1]


def inject_prompts(x: torch.Tensor, prompts: Optional[torch.Tensor], j: int,
                   depth: int) -> torch.Tensor:
    """Insert or refresh the trailing prompt slots of a layer input.

    ``x`` is ``(B, S, d)``. At layer 0 the ``(K, d)`` prompt matrix is appended.
    For ``1 <= j < depth`` the last K rows are replaced by ``prompts``; for
    ``j >= depth`` the input is returned untouched.
    """
    if j < 0:
        raise ValidationError(f"layer index must be >= 0, got {j}")
    if j >= depth:
        return x
    if prompts is None:
        raise ValidationError(f"layer {j} < prompt depth {depth} needs a prompt matrix")
    if prompts.dim() != 2 or prompts.shape[1] != x.shape[-1]:
        raise ShapeError(
            f"prompt shape {tuple(prompts.shape)} does not match width {x.shape[-1]}")
    p = prompts.unsqueeze(0).expand(x.shape[0], -1, -1)
    if j == 0:
        return torch.cat([x, p], dim=1)
    k = prompts.shape[0]
    return torch.cat([x[:, :-k], p], dim=1)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, key_padding_mask: Optional[torch.Tensor]) -> torch.Tensor:
        b, s, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(b, s, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        y = scores.softmax(dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(b, s, d))


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width), nn.GELU(), nn.Linear(mlp_ratio * width, width))

    def forward(self, x: torch.Tensor, key_padding_mask: Optional[torch.Tensor]) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x), key_padding_mask)
        return x + self.mlp(self.ln_2(x))


class _Encoder(nn.Module):
    """Shared transformer trunk: position add, prompt injection, readout."""

    def __init__(self, cfg: EncoderConfig, n_positions: int, embed_dim: int):
        super().__init__()
        self.cfg = cfg
        self.positional_embedding = nn.Parameter(torch.empty(n_positions, cfg.width))
        self.blocks = nn.ModuleList(
            Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln_post = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, embed_dim, bias=False)

    def encode(self, seq: TokenSequence, prompts: Sequence[torch.Tensor],
               trace: Optional[list] = None) -> torch.Tensor:
        depth = len(prompts)
        x = torch.cat([seq.special.unsqueeze(1), seq.content], dim=1)
        x = x + self.positional_embedding[: x.shape[1]]
        mask = None
        if seq.padding_mask is not None:
            b, k = x.shape[0], prompts[0].shape[0]
            no_pad = torch.zeros(b, 1, dtype=torch.bool, device=x.device)
            prompt_slots = torch.zeros(b, k, dtype=torch.bool, device=x.device)
            mask = torch.cat([no_pad, seq.padding_mask, prompt_slots], dim=1)
        for j, block in enumerate(self.blocks):
            x = inject_prompts(x, prompts[j] if j < depth else None, j, depth)
            if trace is not None:
                trace.append(x.detach().clone())
            x = block(x, mask)
        out = self.proj(self.ln_post(x[:, 0]))
        return F.normalize(out, dim=-1)


class VisionEncoder(_Encoder):
    def __init__(self, cfg: EncoderConfig, image_size: int, embed_dim: int):
        n_patches = (image_size // cfg.patch_size) ** 2
        super().__init__(cfg, 1 + n_patches, embed_dim)
        self.image_size = image_size
        self.patch_embed = nn.Linear(3 * cfg.patch_size ** 2, cfg.width, bias=False)
        self.class_embedding = nn.Parameter(torch.empty(cfg.width))

    def embed_patches(self, images: torch.Tensor) -> TokenSequence:
        """Patchify ``(B, H, W, 3)`` images into a token sequence with [CLS]."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        b, hgt, wid, c = images.shape
        p = self.cfg.patch_size
        if c != 3 or hgt % p or wid % p:
            raise ShapeError(f"image {hgt}x{wid}x{c} not divisible into {p}x{p} RGB patches")
        n_pos = self.positional_embedding.shape[0]
        if 1 + (hgt // p) * (wid // p) != n_pos:
            raise ShapeError(
                f"image {hgt}x{wid} gives {(hgt // p) * (wid // p)} patches, "
                f"model expects {n_pos - 1}")
        patches = (images.reshape(b, hgt // p, p, wid // p, p, c)
                   .permute(0, 1, 3, 2, 4, 5)
                   .reshape(b, (hgt // p) * (wid // p), p * p * c))
        content = self.patch_embed(patches.to(self.patch_embed.weight.dtype))
        special = self.class_embedding.expand(b, -1)
        positions = torch.arange(1, 1 + content.shape[1])
        return TokenSequence("vision", special, content, positions)


class TextEncoder(_Encoder):
    def __init__(self, cfg: EncoderConfig, embed_dim: int):
        super().__init__(cfg, 1 + cfg.context_length, embed_dim)
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.width)

    def embed_tokens(self, ids: Sequence[Sequence[int]], pad_id: int, eos_id: int) -> TokenSequence:
        """Embed token id lists (each ending in EOS) padded to the context length."""
        ctx = self.cfg.context_length
        rows, pad = [], []
        for seq in ids:
            content = [i for i in seq if i != eos_id]
            if len(content) > ctx:
                raise TruncationError(f"{len(content)} tokens exceed context length {ctx}")
            rows.append(content + [pad_id] * (ctx - len(content)))
            pad.append([False] * len(content) + [True] * (ctx - len(content)))
        dev = self.token_embedding.weight.device
        id_t = torch.tensor(rows, dtype=torch.long, device=dev)
        content = self.token_embedding(id_t)
        special = self.token_embedding.weight[eos_id].expand(len(rows), -1)
        return TokenSequence("text", special, content, torch.arange(1, 1 + ctx),
                             torch.tensor(pad, dtype=torch.bool, device=dev))


class PromptBank(nn.Module):
    """Per-layer learnable prompt matrices for both encoders."""

    def __init__(self, visual: Sequence[torch.Tensor], textual: Sequence[torch.Tensor]):
        super().__init__()
        self.visual = nn.ParameterList(nn.Parameter(t) for t in visual)
        self.textual = nn.ParameterList(nn.Parameter(t) for t in textual)

    def check(self, pc: PromptConfig, d_v: int, d_t: int) -> None:
        if len(self.visual) != pc.depth_v or len(self.textual) != pc.depth_t:
            raise ShapeError("prompt bank depth does not match configuration")
        for p in self.visual:
            if tuple(p.shape) != (pc.width_v, d_v):
                raise ShapeError(f"visual prompt shape {tuple(p.shape)} != {(pc.width_v, d_v)}")
        for p in self.textual:
            if tuple(p.shape) != (pc.width_t, d_t):
                raise ShapeError(f"text prompt shape {tuple(p.shape)} != {(pc.width_t, d_t)}")
        if not all(torch.isfinite(p).all() for p in self.parameters()):
            raise ValidationError("non-finite prompt entries")


class DualEncoder(nn.Module):
    """Frozen vision/text backbone plus a trainable :class:`PromptBank`.

    Backbone weights come from a seeded initialization and are never
    updated. ``logit_scale`` is a fixed temperature, stored as a buffer.
    """

    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer):
        super().__init__()
        cfg.text.vocab_size = len(tokenizer)
        cfg.validate()
        self.cfg = cfg
        self.tokenizer = tokenizer
        gen = torch.Generator().manual_seed(cfg.seed)
        self.visual = VisionEncoder(cfg.vision, cfg.image_size, cfg.embed_dim)
        self.text = TextEncoder(cfg.text, cfg.embed_dim)
        self._init_backbone(gen)
        self.register_buffer("logit_scale", torch.tensor(float(cfg.logit_scale)))
        self.prompts = self._init_prompts(gen)
        for name, p in self.named_parameters():
            p.requires_grad_(name.startswith("prompts."))

    def _init_backbone(self, gen: torch.Generator) -> None:
        # dual-encoder reference init scales: embeddings 0.02, positions 0.01,
        # attention/MLP weights ~ width**-0.5 with depth-scaled output layers
        def normal_(p, std):
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=gen) * std)

        for enc in (self.visual, self.text):
            w, depth = enc.cfg.width, enc.cfg.depth
            attn_std, proj_std, fc_std = w ** -0.5, w ** -0.5 * (2 * depth) ** -0.5, (2 * w) ** -0.5
            for name, p in enc.named_parameters():
                if name.endswith("bias"):
                    nn.init.zeros_(p)
                elif ".ln_" in name or name.startswith("ln_"):
                    nn.init.ones_(p)
                elif name == "positional_embedding":
                    normal_(p, 0.01)
                elif name in ("token_embedding.weight",):
                    normal_(p, 0.02)
                elif name == "class_embedding":
                    normal_(p, w ** -0.5)
                elif name == "patch_embed.weight":
                    normal_(p, p.shape[1] ** -0.5)
                elif name.endswith("attn.qkv.weight"):
                    normal_(p, attn_std)
                elif name.endswith("attn.out.weight") or name.endswith("mlp.2.weight"):
                    normal_(p, proj_std)
                elif name.endswith("mlp.0.weight"):
                    normal_(p, fc_std)
                elif name == "proj.weight":
                    normal_(p, w ** -0.5)
                else:
                    raise AssertionError(f"no init rule for {name}")

    def _init_prompts(self, gen: torch.Generator) -> PromptBank:
        pc, d_v, d_t = self.cfg.prompt, self.cfg.vision.width, self.cfg.text.width
        std = pc.init_std
        visual = [torch.randn(pc.width_v, d_v, generator=gen) * std for _ in range(pc.depth_v)]
        textual = [torch.randn(pc.width_t, d_t, generator=gen) * std for _ in range(pc.depth_t)]
        if pc.text_init == "phrase":
            ids = self.tokenizer.encode_words(TEXT_INIT_PHRASE)[: pc.width_t]
            with torch.no_grad():
                textual[0][: len(ids)] = self.text.token_embedding.weight[ids].clone()
        return PromptBank(visual, textual)

    # parameter groups -------------------------------------------------
    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("prompts.")]

    def set_trainable(self, visual: bool, textual: bool) -> None:
        for p in self.prompts.visual:
            p.requires_grad_(visual)
        for p in self.prompts.textual:
            p.requires_grad_(textual)

    # forward passes ---------------------------------------------------
    def encode_image(self, images: torch.Tensor, trace: Optional[list] = None) -> torch.Tensor:
        dtype = self.visual.class_embedding.dtype
        seq = self.visual.embed_patches(torch.as_tensor(images, dtype=dtype))
        return self.visual.encode(seq, list(self.prompts.visual), trace)

    def tokenize(self, texts: Sequence[str]) -> list[list[int]]:
        return [tokenize_text(t, self.tokenizer, self.cfg.text.context_length) for t in texts]

    def encode_text(self, texts: Sequence[str], trace: Optional[list] = None) -> torch.Tensor:
        seq = self.text.embed_tokens(self.tokenize(texts), self.tokenizer.pad_id,
                                     self.tokenizer.eos_id)
        return self.text.encode(seq, list(self.prompts.textual), trace)

    def logits(self, image_emb: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
        return self.logit_scale * image_emb @ text_emb.t()


def forward_text(tokens: TokenSequence, state: DualEncoder) -> torch.Tensor:
    """Unit-norm text embeddings for an already embedded token sequence."""
    return state.text.encode(tokens, list(state.prompts.textual))


def forward_image(crops, state: DualEncoder) -> torch.Tensor:
    """Unit-norm image embeddings for ``(B, H, W, 3)`` or ``(H, W, 3)`` crops."""
    return state.encode_image(crops)


def predict(v, label_embeddings) -> tuple[int, np.ndarray]:
    """Cosine-similarity argmax; ties go to the lowest index."""
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(label_embeddings, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] == 0:
        raise ValidationError("need a non-empty list of label embeddings")
    if t.shape[1] != v.shape[-1]:
        raise ShapeError(f"embedding dims differ: {v.shape[-1]} vs {t.shape[1]}")
    scores = (t @ v) / (np.linalg.norm(t, axis=1) * np.linalg.norm(v))
    return int(np.argmax(scores)), scores
