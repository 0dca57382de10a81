"""Decoder-only language model with LoRA adapters.

The model is a toy-scale stand-in for a large instruction-tuned LM: byte
level tokenizer, learned positions, pre-norm causal transformer blocks,
untied output head. Visual tokens enter through forward_embeddings, so the
same forward path serves text-only and multimodal sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import SelfAttention, TransformerBlock
from .errors import ConfigError, ContextOverflowError, EmptyLossMaskError

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
BYTE_VOCAB_SIZE = 259

CHAT_TEMPLATE_VERSION = 1
PROMPT_TEMPLATE = "Q: {question}\nA: "

DEFAULT_LORA_TARGETS = ("q_proj", "v_proj")


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_tokens(ids) -> str:
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


def render_prompt(question: str) -> str:
    return PROMPT_TEMPLATE.format(question=question)


@dataclass
class TokenizedTurn:
    """Shifted next-token arrays with the loss confined to the answer."""

    input_ids: torch.Tensor
    target_ids: torch.Tensor
    loss_mask: torch.Tensor

    def __post_init__(self):
        if not (len(self.input_ids) == len(self.target_ids) == len(self.loss_mask)):
            raise ValueError("input_ids, target_ids, loss_mask must share a length")
        vals = set(self.loss_mask.tolist())
        if not vals <= {0, 1}:
            raise ValueError(f"loss mask must be 0/1, got values {sorted(vals)}")

    def __len__(self) -> int:
        return len(self.input_ids)


def make_turn(question: str, answer: str) -> TokenizedTurn:
    """Tokenize one QA exchange; the loss covers answer bytes plus EOS."""
    prompt_ids = [BOS_ID] + encode_text(render_prompt(question))
    answer_ids = encode_text(answer) + [EOS_ID]
    tokens = prompt_ids + answer_ids
    input_ids = torch.tensor(tokens[:-1], dtype=torch.long)
    target_ids = torch.tensor(tokens[1:], dtype=torch.long)
    # target position i holds tokens[i+1]; answer tokens start at len(prompt_ids)
    mask = torch.tensor(
        [1 if i + 1 >= len(prompt_ids) else 0 for i in range(len(target_ids))],
        dtype=torch.long,
    )
    return TokenizedTurn(input_ids, target_ids, mask)


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = BYTE_VOCAB_SIZE
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    context_window: int = 4096

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )
        if self.vocab_size < 2 or self.num_layers < 1 or self.context_window < 1:
            raise ValueError("vocab_size, num_layers, context_window must be positive")


class CausalLM(nn.Module):
    def __init__(self, config: LMConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or LMConfig()
        c = self.config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.token_embed = nn.Embedding(c.vocab_size, c.embed_dim)
            self.pos_embed = nn.Parameter(0.02 * torch.randn(c.context_window, c.embed_dim))
            self.blocks = nn.ModuleList(
                TransformerBlock(c.embed_dim, c.num_heads, causal=True)
                for _ in range(c.num_layers)
            )
            self.final_norm = nn.LayerNorm(c.embed_dim)
            self.lm_head = nn.Linear(c.embed_dim, c.vocab_size)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embed(ids)

    def forward_embeddings(self, embeds: torch.Tensor) -> torch.Tensor:
        """[L, D] input embeddings (pre-position) to [L, vocab] logits."""
        if embeds.ndim != 2:
            raise ValueError(f"expected [L, D] embeddings, got {tuple(embeds.shape)}")
        length = embeds.shape[0]
        if length > self.config.context_window:
            raise ContextOverflowError(
                f"sequence of {length} tokens exceeds context window "
                f"{self.config.context_window}"
            )
        x = (embeds + self.pos_embed[:length]).unsqueeze(0)
        for block in self.blocks:
            x = block(x)
        return self.lm_head(self.final_norm(x)).squeeze(0)

    def forward_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.forward_embeddings(self.embed_tokens(ids))

    forward = forward_ids


def nll_loss(logits: torch.Tensor, turn: TokenizedTurn) -> torch.Tensor:
    """Mean next-token NLL over the positions the mask selects."""
    if logits.shape[0] != len(turn):
        raise ValueError(
            f"logits cover {logits.shape[0]} positions, turn has {len(turn)}"
        )
    mask = turn.loss_mask.bool()
    if not mask.any():
        raise EmptyLossMaskError("loss mask selects no positions")
    return F.cross_entropy(logits[mask], turn.target_ids[mask])


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 64
    alpha: float | None = None  # defaults to rank, giving scale 1
    targets: tuple[str, ...] = DEFAULT_LORA_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if len(self.targets) == 0:
            raise ValueError("LoRA needs at least one target")

    @property
    def scaling(self) -> float:
        alpha = self.rank if self.alpha is None else self.alpha
        return alpha / self.rank


class LoraLinear(nn.Module):
    """W x + b plus a scaled low-rank update (alpha/r) B A x.

    B starts at zero, so a freshly adapted layer computes exactly what the
    base layer did. The base weights are frozen here; only A and B train.
    """

    def __init__(self, base: nn.Linear, rank: int, scaling: float):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.scaling = scaling
        in_dim, out_dim = base.in_features, base.out_features
        self.lora_a = nn.Parameter(torch.randn(rank, in_dim) / math.sqrt(in_dim))
        self.lora_b = nn.Parameter(torch.zeros(out_dim, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_a), self.lora_b)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features


def apply_lora(model: nn.Module, config: LoraConfig) -> nn.Module:
    """Wrap every attention projection named in config.targets in place."""
    hits = {name: 0 for name in config.targets}
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        for module in model.modules():
            if not isinstance(module, SelfAttention):
                continue
            for name in config.targets:
                layer = getattr(module, name, None)
                if isinstance(layer, nn.Linear):
                    setattr(module, name, LoraLinear(layer, config.rank, config.scaling))
                    hits[name] += 1
    missing = [name for name, count in hits.items() if count == 0]
    if missing:
        raise ConfigError(f"LoRA targets not found in model: {missing}")
    return model


def lora_parameters(model: nn.Module):
    for module in model.modules():
        if isinstance(module, LoraLinear):
            yield module.lora_a
            yield module.lora_b


def lora_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in lora_parameters(model))


@dataclass
class GenerationResult:
    token_ids: list[int] = field(default_factory=list)

    @property
    def text(self) -> str:
        return decode_tokens(self.token_ids)


def generate(
    model: CausalLM,
    prefix_embeds: torch.Tensor,
    max_new: int,
    mode: str = "greedy",
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
    stop_id: int = EOS_ID,
) -> GenerationResult:
    """Autoregressive continuation of an embedded prefix.

    Greedy mode is deterministic; sampling needs a seeded generator for
    repeatability. Generation ends at stop_id (included in the output) or
    after max_new tokens.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"mode must be greedy or sample, got {mode!r}")
    if mode == "sample" and temperature <= 0:
        raise ValueError("sampling temperature must be positive")
    prefix_len = prefix_embeds.shape[0]
    if prefix_len + max_new > model.config.context_window:
        raise ContextOverflowError(
            f"prefix {prefix_len} + max_new {max_new} exceeds context window "
            f"{model.config.context_window}"
        )
    out: list[int] = []
    current = prefix_embeds
    with torch.no_grad():
        for _ in range(max_new):
            logits = model.forward_embeddings(current)[-1]
            if mode == "greedy":
                next_id = int(logits.argmax().item())
            else:
                probs = F.softmax(logits / temperature, dim=-1)
                next_id = int(torch.multinomial(probs, 1, generator=generator).item())
            out.append(next_id)
            if next_id == stop_id:
                break
            next_embed = model.embed_tokens(torch.tensor([next_id]))
            current = torch.cat([current, next_embed], dim=0)
    return GenerationResult(out)


def generate_text(
    model: CausalLM,
    question: str,
    max_new: int = 64,
    mode: str = "greedy",
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
) -> str:
    """Text-only convenience wrapper: prompt template in, decoded reply out."""
    ids = [BOS_ID] + encode_text(render_prompt(question))
    embeds = model.embed_tokens(torch.tensor(ids, dtype=torch.long))
    return generate(model, embeds, max_new, mode, temperature, generator).text
