"""Denoising networks for the two diffusion stages.

The command network is a stylized transformer encoder over command tokens.
The parameter network adds, per block, a local self-attention restricted to
slots of the same owning command and a cross-attention onto the embedded
command sequence.  Both predict clean-token logits only (the absorbing
symbol is never in the output head).
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .cadseq import PAD_OWNER
from .config import DenoiserConfig

N_COMMANDS = 6
CMD_ABSORB_EMB = 6       # command embedding row for the absorbing symbol
CMD_PAD_EMB = 7          # command-repeat embedding row for PAD slots (frozen zero)
N_VALUES = 256
VAL_ABSORB_EMB = 256     # parameter embedding row for the absorbing symbol
VAL_PAD_EMB = 257        # parameter embedding row for PAD slots (frozen zero)

NEG_INF = float("-inf")


class LengthExceeded(ValueError):
    pass


class LayoutMismatch(ValueError):
    pass


class ConditionOutOfRange(ValueError):
    pass


def build_local_mask(owners) -> np.ndarray:
    """Additive mask: 0 where two slots share an owning command, else -inf.

    PAD positions (owner == PAD_OWNER) attend only to themselves.
    """
    owners = np.asarray(owners, dtype=np.int64)
    if owners.ndim != 1:
        raise LayoutMismatch("owners must be one-dimensional")
    eff = owners != PAD_OWNER
    if np.any(np.diff(owners[eff]) < 0):
        raise LayoutMismatch("owners must be non-decreasing")
    same = owners[:, None] == owners[None, :]
    allowed = same & eff[:, None] & eff[None, :]
    np.fill_diagonal(allowed, True)
    mask = np.where(allowed, 0.0, NEG_INF)
    return mask


def _local_mask_batch(owners: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """(B, 1, L, L) additive mask mirroring build_local_mask."""
    eff = owners != PAD_OWNER
    same = owners.unsqueeze(2) == owners.unsqueeze(1)
    allowed = same & eff.unsqueeze(2) & eff.unsqueeze(1)
    eye = torch.eye(owners.shape[1], dtype=torch.bool, device=owners.device)
    allowed = allowed | eye.unsqueeze(0)
    mask = torch.zeros(allowed.shape, dtype=dtype, device=owners.device)
    mask.masked_fill_(~allowed, NEG_INF)
    return mask.unsqueeze(1)


def _key_pad_mask(eff: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """(B, 1, 1, L) additive mask hiding PAD keys from every query."""
    mask = torch.zeros(eff.shape, dtype=dtype, device=eff.device)
    mask.masked_fill_(~eff, NEG_INF)
    return mask[:, None, None, :]


def _timestep_features(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Classic sinusoidal features of the diffusion step, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype, device=t.device) / half
    )
    ang = t.to(dtype)[:, None] * freqs[None, :]
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        out = torch.cat([out, torch.zeros_like(out[:, :1])], dim=-1)
    return out


class TimeModulation(nn.Module):
    """Sinusoidal step features -> MLP -> per-step (scale, shift) pair.

    The output layer starts at zero, so modulation is the identity at init.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.lin1 = nn.Linear(d_model, d_model)
        self.lin2 = nn.Linear(d_model, 2 * d_model)

    def forward(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        emb = _timestep_features(t, self.d_model, self.lin1.weight.dtype)
        h = torch.nn.functional.gelu(self.lin1(emb))
        scale, shift = self.lin2(h).chunk(2, dim=-1)
        return scale, shift


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.wq = nn.Linear(d_model, d_model, bias=False)
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model, bias=False)
        self.wo = nn.Linear(d_model, d_model)

    def forward(self, q_src: torch.Tensor, kv_src: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        b, lq, d = q_src.shape
        lk = kv_src.shape[1]
        h, hd = self.n_heads, self.head_dim
        q = self.wq(q_src).view(b, lq, h, hd).transpose(1, 2)
        k = self.wk(kv_src).view(b, lk, h, hd).transpose(1, 2)
        v = self.wv(kv_src).view(b, lk, h, hd).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        if mask is not None:
            scores = scores + mask
        att = torch.softmax(scores, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, lq, d)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.lin1 = nn.Linear(d_model, 4 * d_model)
        self.lin2 = nn.Linear(4 * d_model, d_model)

    def forward(self, x):
        return self.lin2(torch.nn.functional.gelu(self.lin1(x)))


class CommandBlock(nn.Module):
    """Pre-norm self-attention block, with optional conditional cross-attention."""

    def __init__(self, d_model: int, n_heads: int, conditioned: bool,
                 dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.conditioned = conditioned
        if conditioned:
            self.ln_cross = nn.LayerNorm(d_model)
            self.cross = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, cond=None):
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h))
        if self.conditioned and cond is not None:
            x = x + self.drop(self.cross(self.ln_cross(x), cond))
        x = x + self.drop(self.ff(self.ln2(x)))
        return x


class ParamBlock(nn.Module):
    """Global self-attention, owner-masked local self-attention, then
    cross-attention onto the command features, each pre-norm residual."""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.ln_g = nn.LayerNorm(d_model)
        self.attn_global = MultiHeadAttention(d_model, n_heads)
        self.ln_l = nn.LayerNorm(d_model)
        self.attn_local = MultiHeadAttention(d_model, n_heads)
        self.ln_x = nn.LayerNorm(d_model)
        self.attn_cross = MultiHeadAttention(d_model, n_heads)
        self.ln_f = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, cmd_feats, key_mask, local_mask, cmd_key_mask):
        h = self.ln_g(x)
        x = x + self.drop(self.attn_global(h, h, mask=key_mask))
        h = self.ln_l(x)
        x = x + self.drop(self.attn_local(h, h, mask=local_mask))
        x = x + self.drop(self.attn_cross(self.ln_x(x), cmd_feats, mask=cmd_key_mask))
        x = x + self.drop(self.ff(self.ln_f(x)))
        return x


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            m.weight.data.normal_(0.0, 0.02, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.Embedding):
            m.weight.data.normal_(0.0, 0.02, generator=gen)
        elif isinstance(m, nn.LayerNorm):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()
    for m in module.modules():
        if isinstance(m, TimeModulation):
            m.lin2.weight.data.zero_()
            m.lin2.bias.data.zero_()


class CommandDenoiser(nn.Module):
    """Predicts clean-command logits from a corrupted command sequence."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.tok_emb = nn.Embedding(N_COMMANDS + 1, d)  # commands + absorbing
        self.pos_emb = nn.Embedding(config.max_cmd_len, d)
        self.mod = TimeModulation(d)
        self.ln_in = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(
            CommandBlock(d, config.n_heads, config.condition != "none", config.dropout)
            for _ in range(config.n_blocks_cmd)
        )
        self.ln_out = nn.LayerNorm(d)
        self.head = nn.Linear(d, N_COMMANDS)

    def stylize(self, tokens: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Embed tokens and modulate them with the diffusion step."""
        b, l = tokens.shape
        if l > self.config.max_cmd_len:
            raise LengthExceeded(f"{l} command tokens > {self.config.max_cmd_len}")
        pos = torch.arange(l, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None]
        scale, shift = self.mod(t)
        return self.ln_in(x) * (1.0 + scale[:, None, :]) + shift[:, None, :]

    def forward(self, tokens: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor | None = None) -> torch.Tensor:
        x = self.stylize(tokens, t)
        for block in self.blocks:
            x = block(x, cond)
        return self.head(self.ln_out(x))


class ParamDenoiser(nn.Module):
    """Predicts clean-value logits from corrupted parameter slots, attending
    within owning commands and across to the repeated command sequence."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.tok_emb = nn.Embedding(N_VALUES + 2, d)     # values, absorbing, PAD
        self.cmd_emb = nn.Embedding(N_COMMANDS + 2, d)   # commands, absorbing, PAD
        self.pos_emb = nn.Embedding(config.max_param_len, d)
        self.mod = TimeModulation(d)
        self.ln_in = nn.LayerNorm(d)
        self.ln_cmd = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(
            ParamBlock(d, config.n_heads, config.dropout)
            for _ in range(config.n_blocks_param)
        )
        self.ln_out = nn.LayerNorm(d)
        self.head = nn.Linear(d, N_VALUES)

    def _positions(self, l: int, device) -> torch.Tensor:
        if l > self.config.max_param_len:
            raise LengthExceeded(f"{l} parameter slots > {self.config.max_param_len}")
        return torch.arange(l, device=device)

    def stylize(self, tokens: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        pos = self._positions(tokens.shape[1], tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None]
        scale, shift = self.mod(t)
        return self.ln_in(x) * (1.0 + scale[:, None, :]) + shift[:, None, :]

    def stylize_commands(self, rep_cmds: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        pos = self._positions(rep_cmds.shape[1], rep_cmds.device)
        x = self.cmd_emb(rep_cmds) + self.pos_emb(pos)[None]
        scale, shift = self.mod(t)
        return self.ln_cmd(x) * (1.0 + scale[:, None, :]) + shift[:, None, :]

    def forward(self, tokens: torch.Tensor, t: torch.Tensor,
                rep_cmds: torch.Tensor, owners: torch.Tensor,
                eff: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        """tokens: (B, L) embedding rows; rep_cmds: (B, L) embedding rows;
        owners: (B, L) with PAD_OWNER sentinels; eff: (B, L) bool."""
        if tokens.shape != rep_cmds.shape or tokens.shape != owners.shape:
            raise LayoutMismatch("tokens, rep_cmds and owners must share a shape")
        dtype = self.head.weight.dtype
        x = self.stylize(tokens, t)
        cmd_feats = self.stylize_commands(rep_cmds, t)
        if cond is not None:
            cmd_feats = cmd_feats + cond
        key_mask = _key_pad_mask(eff, dtype)
        local_mask = _local_mask_batch(owners, dtype)
        for block in self.blocks:
            x = block(x, cmd_feats, key_mask, local_mask, key_mask)
        return self.head(self.ln_out(x))


class LengthConditioner(nn.Module):
    """One-hot command count -> linear -> a single condition vector."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.max_len = config.max_cmd_len
        self.proj = nn.Linear(self.max_len, config.d_model)

    def forward(self, n: torch.Tensor) -> torch.Tensor:
        if torch.any(n < 1) or torch.any(n > self.max_len):
            raise ConditionOutOfRange(f"length condition outside 1..{self.max_len}")
        onehot = torch.nn.functional.one_hot(n - 1, self.max_len)
        onehot = onehot.to(self.proj.weight.dtype)
        return self.proj(onehot)[:, None, :]


class CascadeNets(nn.Module):
    """Both stage networks plus the optional condition encoder."""

    def __init__(self, config: DenoiserConfig, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.cmd = CommandDenoiser(config)
        self.par = ParamDenoiser(config)
        self.length_cond = (
            LengthConditioner(config) if config.condition == "length" else None
        )
        gen = torch.Generator().manual_seed(seed)
        _init_module(self, gen)
        self.par.tok_emb.weight.data[VAL_PAD_EMB].zero_()
        self.par.cmd_emb.weight.data[CMD_PAD_EMB].zero_()
        self.to(dtype)

    def condition_features(self, lengths: torch.Tensor) -> torch.Tensor:
        if self.length_cond is None:
            raise ConditionOutOfRange("network was built without a condition encoder")
        return self.length_cond(lengths)
