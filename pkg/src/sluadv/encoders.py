"""Sentence encoders: a small trainable transformer and 1-layer CNN encoders."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .nn import Dense, conv_tokens, dropout, masked_max_pool


@dataclass
class EncoderOutput:
    token_reps: torch.Tensor  # [B, T, d]
    sentence_rep: torch.Tensor  # [B, d]


class LayerNorm(nn.Module):
    def __init__(self, d, eps=1e-12, dtype=torch.float64):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], self.gain, self.bias, self.eps)


class SelfAttention(nn.Module):
    def __init__(self, d, n_heads, dtype=torch.float64):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d_model {d} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.query = Dense(d, d, dtype=dtype)
        self.key = Dense(d, d, dtype=dtype)
        self.value = Dense(d, d, dtype=dtype)
        self.out = Dense(d, d, dtype=dtype)

    def weights(self, x, mask):
        B, T, d = x.shape
        h = self.n_heads
        q = self.query(x).view(B, T, h, d // h).transpose(1, 2)
        k = self.key(x).view(B, T, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, x, mask, rate=0.0, train=False):
        B, T, d = x.shape
        h = self.n_heads
        attn = dropout(self.weights(x, mask), rate, train)
        v = self.value(x).view(B, T, h, d // h).transpose(1, 2)
        ctx = (attn @ v).transpose(1, 2).reshape(B, T, d)
        return self.out(ctx)


class TransformerLayer(nn.Module):
    def __init__(self, d, n_heads, d_ff, dtype=torch.float64):
        super().__init__()
        self.attention = SelfAttention(d, n_heads, dtype)
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.ff_in = Dense(d, d_ff, "gelu", dtype)
        self.ff_out = Dense(d_ff, d, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)

    def forward(self, x, mask, rate=0.0, train=False):
        x = self.norm1(x + dropout(self.attention(x, mask, rate, train), rate, train))
        return self.norm2(x + dropout(self.ff_out(self.ff_in(x)), rate, train))


class BertLikeEncoder(nn.Module):
    """Token + learned position embeddings followed by post-norm transformer layers.

    Stand-in for a pre-trained multilingual encoder, trained from scratch.
    """

    def __init__(self, vocab_size, d_model=128, n_layers=2, n_heads=4, d_ff=256, max_len=32,
                 dropout_rate=0.1, dtype=torch.float64):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.token_embedding = nn.Parameter(torch.randn(vocab_size, d_model, dtype=dtype) * 0.1)
        self.position_embedding = nn.Parameter(torch.randn(max_len, d_model, dtype=dtype) * 0.1)
        self.layers = nn.ModuleList(TransformerLayer(d_model, n_heads, d_ff, dtype) for _ in range(n_layers))
        self.max_len = max_len
        self.d_out = d_model
        self.dropout_rate = dropout_rate

    def embed(self, token_ids):
        T = token_ids.shape[-1]
        if T > self.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.max_len}")
        if token_ids.numel() and int(token_ids.max()) >= self.token_embedding.shape[0]:
            raise ValueError("token id outside the vocabulary")
        return self.token_embedding[token_ids] + self.position_embedding[:T]

    def forward(self, token_ids, mask, train=False) -> EncoderOutput:
        x = dropout(self.embed(token_ids), self.dropout_rate, train)
        for layer in self.layers:
            x = layer(x, mask, self.dropout_rate, train)
        x = x * mask.unsqueeze(-1).to(x.dtype)
        return EncoderOutput(x, masked_max_pool(x, mask))

    def load_embeddings(self, path, vocab) -> int:
        """Copy rows from a whitespace-separated ``<token> v1 ... vd`` text file.

        Returns the number of vocabulary rows that were replaced.
        """
        d = self.token_embedding.shape[1]
        hits = 0
        with torch.no_grad():
            for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != d + 1:
                    raise ValueError(f"{path}:{lineno}: expected {d} values, got {len(parts) - 1}")
                idx = vocab.token_to_id.get(parts[0])
                if idx is None:
                    continue
                self.token_embedding[idx] = torch.tensor([float(v) for v in parts[1:]],
                                                         dtype=self.token_embedding.dtype)
                hits += 1
        return hits


class CnnEncoder(nn.Module):
    def __init__(self, d_in, d_out, dtype=torch.float64):
        super().__init__()
        bound = 1.0 / math.sqrt(3 * d_in)
        self.kernel = nn.Parameter((torch.rand(d_out, 3, d_in, dtype=dtype) * 2 - 1) * bound)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=dtype))
        self.d_out = d_out

    def forward(self, H, mask) -> EncoderOutput:
        reps = conv_tokens(H, self.kernel, self.bias, mask)
        return EncoderOutput(reps, masked_max_pool(reps, mask))


def bert_like_forward(token_ids, mask, params: BertLikeEncoder, train=False) -> EncoderOutput:
    return params(token_ids, mask, train)


def cnn_encoder_forward(H, mask, params: CnnEncoder) -> EncoderOutput:
    return params(H, mask)
