"""Decoder-only transformer exposing logits, residual-stream snapshots, and
per-neuron activations.

Pre-norm blocks with absolute learned positions, exact GELU, and the
unembedding tied to the input embedding; a final normalization is applied
before unembedding, which also makes intermediate-layer vocabulary
projection well defined (see ``project_to_vocab``).  Traced quantities per
block: the residual stream after the block (embedding output as layer 0),
the attention output before its output projection (d_hidden dims), and the
FFN intermediate after the activation (d_ffn dims).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import TrainingDiverged, ValidationError
from .tensorfile import read_tensor_file, write_tensor_file

INIT_STD = 0.02

# layers, d_embed, d_hidden, d_ffn, n_heads, d_head
_PRESET_DIMS = {
    "Base": (12, 768, 768, 3072, 12, 64),
    "Small": (4, 512, 512, 2048, 8, 64),
    "Tiny": (2, 128, 128, 512, 2, 64),
}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_embed: int
    d_hidden: int
    d_ffn: int
    n_heads: int
    d_head: int
    vocab_size: int
    max_seq_len: int = 256
    dropout: float = 0.1
    attention_dropout: float = 0.1
    position_embedding: str = "absolute"
    activation: str = "gelu"

    def validate(self) -> None:
        if self.d_hidden != self.n_heads * self.d_head:
            raise ValidationError(
                f"d_hidden {self.d_hidden} != n_heads {self.n_heads} x d_head {self.d_head}"
            )
        if self.d_embed != self.d_hidden:
            raise ValidationError(
                f"d_embed {self.d_embed} != d_hidden {self.d_hidden}: unequal widths "
                "would need a projection this architecture does not define"
            )
        if min(self.n_layers, self.vocab_size, self.max_seq_len, self.d_ffn) <= 0:
            raise ValidationError("all dimensions must be positive")
        if self.position_embedding != "absolute":
            raise ValidationError(f"unsupported position embedding {self.position_embedding!r}")
        if self.activation != "gelu":
            raise ValidationError(f"unsupported activation {self.activation!r}")
        for name in ("dropout", "attention_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValidationError(f"{name} must be in [0, 1), got {p}")


def preset(name: str, vocab_size: int, max_seq_len: int = 256, **overrides) -> ModelConfig:
    if name not in _PRESET_DIMS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(_PRESET_DIMS)}")
    n_layers, d_embed, d_hidden, d_ffn, n_heads, d_head = _PRESET_DIMS[name]
    cfg = ModelConfig(
        n_layers=n_layers,
        d_embed=d_embed,
        d_hidden=d_hidden,
        d_ffn=d_ffn,
        n_heads=n_heads,
        d_head=d_head,
        vocab_size=vocab_size,
        max_seq_len=max_seq_len,
    )
    return replace(cfg, **overrides) if overrides else cfg


class _CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.qkv = nn.Linear(cfg.d_hidden, 3 * cfg.d_hidden)
        self.proj = nn.Linear(cfg.d_hidden, cfg.d_hidden)
        mask = torch.tril(torch.ones(cfg.max_seq_len, cfg.max_seq_len, dtype=torch.bool))
        self.register_buffer("mask", mask.view(1, 1, cfg.max_seq_len, cfg.max_seq_len), persistent=False)

    def forward(self, x: torch.Tensor, train_mode: bool) -> tuple[torch.Tensor, torch.Tensor]:
        B, T, H = x.shape
        nh, dh = self.cfg.n_heads, self.cfg.d_head
        q, k, v = self.qkv(x).split(H, dim=2)
        q = q.view(B, T, nh, dh).transpose(1, 2)
        k = k.view(B, T, nh, dh).transpose(1, 2)
        v = v.view(B, T, nh, dh).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(dh))
        att = att.masked_fill(~self.mask[:, :, :T, :T], float("-inf"))
        att = F.softmax(att, dim=-1)
        att = F.dropout(att, p=self.cfg.attention_dropout, training=train_mode)
        y = (att @ v).transpose(1, 2).contiguous().view(B, T, H)
        pre_proj = y
        out = F.dropout(self.proj(y), p=self.cfg.dropout, training=train_mode)
        return out, pre_proj


class _Mlp(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.fc = nn.Linear(cfg.d_hidden, cfg.d_ffn)
        self.proj = nn.Linear(cfg.d_ffn, cfg.d_hidden)

    def forward(self, x: torch.Tensor, train_mode: bool) -> tuple[torch.Tensor, torch.Tensor]:
        inter = F.gelu(self.fc(x))
        out = F.dropout(self.proj(inter), p=self.cfg.dropout, training=train_mode)
        return out, inter


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_hidden)
        self.attn = _CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_hidden)
        self.mlp = _Mlp(cfg)

    def forward(self, x, train_mode):
        attn_out, attn_pre = self.attn(self.ln1(x), train_mode)
        x = x + attn_out
        mlp_out, ffn_inter = self.mlp(self.ln2(x), train_mode)
        x = x + mlp_out
        return x, attn_pre, ffn_inter


class DecoderLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.wte = nn.Embedding(cfg.vocab_size, cfg.d_embed)
        self.wpe = nn.Embedding(cfg.max_seq_len, cfg.d_embed)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_hidden)

    def forward(self, idx: torch.Tensor, train_mode: bool = False, collect_trace: bool = False):
        B, T = idx.shape
        pos = torch.arange(T, device=idx.device)
        x = self.wte(idx) + self.wpe(pos)
        x = F.dropout(x, p=self.cfg.dropout, training=train_mode)
        hidden = [x] if collect_trace else None
        attn_acts = [] if collect_trace else None
        ffn_acts = [] if collect_trace else None
        for block in self.blocks:
            x, attn_pre, ffn_inter = block(x, train_mode)
            if collect_trace:
                hidden.append(x)
                attn_acts.append(attn_pre)
                ffn_acts.append(ffn_inter)
        logits = self.head(x)
        return logits, hidden, attn_acts, ffn_acts

    def head(self, x: torch.Tensor) -> torch.Tensor:
        # Unembedding tied to the input embedding, after final normalization.
        return F.linear(self.ln_f(x), self.wte.weight)


@dataclass
class ModelState:
    config: ModelConfig
    module: DecoderLM
    seed: int
    step: int = 0

    def n_params(self) -> int:
        return sum(p.numel() for p in self.module.parameters())


@dataclass
class ForwardTrace:
    """Single-sequence outputs; trace lists are None unless requested."""

    logits: torch.Tensor  # [T, vocab]
    hidden_states: list[torch.Tensor] | None = None  # n_layers+1 x [T, d_hidden]
    attn_activations: list[torch.Tensor] | None = None  # n_layers x [T, d_hidden]
    ffn_activations: list[torch.Tensor] | None = None  # n_layers x [T, d_ffn]


@dataclass
class BatchTrace:
    logits: torch.Tensor  # [B, T, vocab]
    hidden_states: list[torch.Tensor] | None = None
    attn_activations: list[torch.Tensor] | None = None
    ffn_activations: list[torch.Tensor] | None = None


def init(config: ModelConfig, seed: int) -> ModelState:
    """Fresh parameters: normal(0, 0.02), residual projections scaled by
    1/sqrt(2*n_layers), biases zero, norm weights one; deterministic in seed."""
    config.validate()
    module = DecoderLM(config)
    module.eval()
    g = torch.Generator().manual_seed(seed)
    resid_std = INIT_STD / math.sqrt(2 * config.n_layers)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                std = resid_std if name.endswith(("attn.proj.weight", "mlp.proj.weight")) else INIT_STD
                p.normal_(0.0, std, generator=g)
            elif name.endswith(".bias"):
                p.zero_()
            else:  # 1-d weights are LayerNorm scales
                p.fill_(1.0)
    return ModelState(config=config, module=module, seed=seed, step=0)


def _as_batch_tensor(state: ModelState, rows) -> torch.Tensor:
    arr = np.asarray(rows)
    if arr.ndim != 2:
        raise ValidationError(f"batch must be 2-d [rows, positions], got shape {arr.shape}")
    if arr.shape[1] > state.config.max_seq_len:
        raise ValidationError(
            f"input length {arr.shape[1]} exceeds max_seq_len {state.config.max_seq_len}"
        )
    if arr.size and (arr.min() < 0 or arr.max() >= state.config.vocab_size):
        raise ValidationError("token id out of range")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.int64))


def forward_batch(state: ModelState, rows, trace: bool = False, train_mode: bool = False) -> BatchTrace:
    idx = _as_batch_tensor(state, rows)
    with torch.no_grad():
        logits, hidden, attn_acts, ffn_acts = state.module(idx, train_mode=train_mode, collect_trace=trace)
    return BatchTrace(logits=logits, hidden_states=hidden, attn_activations=attn_acts, ffn_activations=ffn_acts)


def forward(state: ModelState, tokens: Sequence[int], trace: bool = False, train_mode: bool = False) -> ForwardTrace:
    """Run one sequence; causal, deterministic when ``train_mode`` is off."""
    bt = forward_batch(state, np.asarray(list(tokens), dtype=np.int64).reshape(1, -1), trace, train_mode)
    return ForwardTrace(
        logits=bt.logits[0],
        hidden_states=[h[0] for h in bt.hidden_states] if trace else None,
        attn_activations=[a[0] for a in bt.attn_activations] if trace else None,
        ffn_activations=[a[0] for a in bt.ffn_activations] if trace else None,
    )


def compute_loss(state: ModelState, batch, train_mode: bool = False) -> torch.Tensor:
    """Mean next-token cross-entropy over the batch, with autograd graph."""
    idx = _as_batch_tensor(state, batch)
    if idx.shape[1] < 2:
        raise ValidationError("rows need at least 2 tokens for next-token loss")
    logits, _, _, _ = state.module(idx, train_mode=train_mode, collect_trace=False)
    targets = idx[:, 1:].reshape(-1)
    return F.cross_entropy(logits[:, :-1].reshape(-1, state.config.vocab_size), targets)


def loss_and_grads(state: ModelState, batch, train_mode: bool = False) -> tuple[float, dict[str, torch.Tensor]]:
    state.module.zero_grad(set_to_none=True)
    loss = compute_loss(state, batch, train_mode=train_mode)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in state.module.named_parameters()}
    state.module.zero_grad(set_to_none=True)
    return float(loss.item()), grads


def sequence_logprob(state: ModelState, tokens: Sequence[int], score_range: tuple[int, int]) -> tuple[float, int]:
    """Sum of causal log-probabilities of ``tokens[start:end]`` given their
    prefixes; earlier positions condition but are not scored.

    The score is a causal log-likelihood (the usual length normalization by
    the returned token count is applied by callers).  Log-softmax runs in
    float64 for stable comparisons.
    """
    tokens = list(tokens)
    start, end = score_range
    if not (0 < start <= end <= len(tokens)):
        raise ValidationError(f"score range [{start}, {end}) invalid for length {len(tokens)}")
    trace = forward(state, tokens)
    logprobs = torch.log_softmax(trace.logits.double(), dim=-1)
    idx = torch.tensor(tokens[start:end], dtype=torch.int64)
    total = logprobs[torch.arange(start - 1, end - 1), idx].sum()
    return float(total.item()), end - start


def project_to_vocab(state: ModelState, hidden: torch.Tensor) -> torch.Tensor:
    """Decode residual-stream states through final norm + unembedding.

    At the last layer this is exactly the model's own head, so decoded
    top-k there equals the true output top-k.
    """
    with torch.no_grad():
        return state.module.head(hidden)


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_KIND = "xli-checkpoint"


def save_checkpoint(
    state: ModelState,
    path: str | Path,
    optimizer: torch.optim.Optimizer | None = None,
    extra_meta: dict | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = {}
    named = dict(state.module.named_parameters())
    for name, p in named.items():
        tensors[f"param.{name}"] = p.detach().cpu().numpy()
    if optimizer is not None:
        for name, p in named.items():
            st = optimizer.state.get(p)
            if not st:
                continue
            tensors[f"opt.exp_avg.{name}"] = st["exp_avg"].detach().cpu().numpy()
            tensors[f"opt.exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().cpu().numpy()
            tensors[f"opt.step.{name}"] = np.asarray(float(st["step"]), dtype=np.float64)
    meta = {
        "kind": CHECKPOINT_KIND,
        "format_version": 1,
        "config": asdict(state.config),
        "seed": state.seed,
        "step": state.step,
        "extra": extra_meta or {},
    }
    write_tensor_file(path, meta, tensors)


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict[str, dict[str, np.ndarray]], dict]:
    meta, tensors = read_tensor_file(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ValidationError(f"{path}: not a checkpoint (kind {meta.get('kind')!r})")
    config = ModelConfig(**meta["config"])
    config.validate()
    module = DecoderLM(config)
    module.eval()
    with torch.no_grad():
        for name, p in module.named_parameters():
            key = f"param.{name}"
            if key not in tensors:
                raise ValidationError(f"{path}: missing tensor {key}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValidationError(f"{path}: shape mismatch for {key}")
            p.copy_(torch.from_numpy(arr))
    opt_state: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in tensors.items():
        if key.startswith("opt."):
            kind, name = key[4:].split(".", 1)
            opt_state.setdefault(name, {})[kind] = arr
    state = ModelState(config=config, module=module, seed=meta["seed"], step=meta["step"])
    return state, opt_state, meta
