"""IC, SF and language heads, plus the linear-chain CRF.

Transition matrices are ``[(L+2), (L+2)]``; index ``L`` is START and
``L+1`` is END.
"""

from __future__ import annotations

import itertools
import math

import torch
from torch import nn

from .nn import Dense, FeedForward, softmax_xent


class IcDecoder(nn.Module):
    def __init__(self, d_in, n_intents, hidden=128, rate=0.5, dtype=torch.float64):
        super().__init__()
        self.ffn = FeedForward(d_in, hidden, 2, rate, dtype)
        self.proj = Dense(hidden, n_intents, dtype=dtype)

    def logits(self, s, train=False):
        return self.proj(self.ffn(s, train))

    def forward(self, s, train=False):
        return torch.softmax(self.logits(s, train), dim=-1)


class SfDecoder(nn.Module):
    def __init__(self, d_in, n_labels, hidden=128, rate=0.2, dtype=torch.float64):
        super().__init__()
        self.ffn = FeedForward(d_in, hidden, 2, rate, dtype)
        self.proj = Dense(hidden, n_labels, dtype=dtype)
        self.transitions = nn.Parameter(torch.zeros(n_labels + 2, n_labels + 2, dtype=dtype))
        self.n_labels = n_labels

    def forward(self, H, train=False):
        return self.proj(self.ffn(H, train))


class LangHead(nn.Module):
    def __init__(self, d_in, n_languages, hidden=128, rate=0.5, dtype=torch.float64):
        super().__init__()
        self.ffn = FeedForward(d_in, hidden, 1, rate, dtype)
        self.proj = Dense(hidden, n_languages, dtype=dtype)

    def logits(self, s, train=False):
        return self.proj(self.ffn(s, train))

    def forward(self, s, train=False):
        return torch.softmax(self.logits(s, train), dim=-1)


def ic_forward(s_u, params: IcDecoder, train=False):
    return params(s_u, train)


def sf_emissions(H, params: SfDecoder, train=False):
    return params(H, train)


def lang_head_forward(s, params: LangHead, train=False):
    return params(s, train)


def intent_loss(logits, target):
    return softmax_xent(logits, target)[1]


# -- CRF -----------------------------------------------------------------------

def _batched(emissions, mask, labels=None):
    single = emissions.dim() == 2
    if single:
        emissions = emissions.unsqueeze(0)
        mask = mask.unsqueeze(0)
        labels = None if labels is None else labels.unsqueeze(0)
    mask = mask.bool()
    if not mask[:, 0].all():
        raise ValueError("CRF mask must be a non-empty contiguous prefix")
    return single, emissions, mask, labels


def crf_log_partition(emissions, A, mask):
    """log Z by the forward algorithm; ``emissions`` is ``[B, T, L]``."""
    single, e, mask, _ = _batched(emissions, mask)
    L = e.shape[-1]
    trans = A[:L, :L]
    alpha = A[L, :L] + e[:, 0]
    for t in range(1, e.shape[1]):
        nxt = torch.logsumexp(alpha.unsqueeze(2) + trans + e[:, t].unsqueeze(1), dim=1)
        alpha = torch.where(mask[:, t].unsqueeze(1), nxt, alpha)
    logz = torch.logsumexp(alpha + A[:L, L + 1], dim=1)
    return logz[0] if single else logz


def crf_path_score(emissions, A, labels, mask):
    single, e, mask, y = _batched(emissions, mask, labels)
    L = e.shape[-1]
    m = mask.to(e.dtype)
    emit = (e.gather(2, y.unsqueeze(2)).squeeze(2) * m).sum(1)
    trans = (A[y[:, :-1], y[:, 1:]] * m[:, 1:]).sum(1)
    last = y.gather(1, (mask.sum(1) - 1).unsqueeze(1)).squeeze(1)
    score = emit + trans + A[L, y[:, 0]] + A[last, L + 1]
    return score[0] if single else score


def crf_neg_log_likelihood(emissions, A, labels, mask):
    """``log Z - score(labels)`` per sequence."""
    return crf_log_partition(emissions, A, mask) - crf_path_score(emissions, A, labels, mask)


def crf_viterbi(emissions, A, mask):
    """Best label path per sequence (lists truncated to the valid length).

    Ties resolve to the lower label index at every backpointer.
    """
    single, e, mask, _ = _batched(emissions, mask)
    L = e.shape[-1]
    with torch.no_grad():
        trans = A[:L, :L]
        delta = A[L, :L] + e[:, 0]
        pointers = []
        for t in range(1, e.shape[1]):
            best, idx = (delta.unsqueeze(2) + trans).max(dim=1)
            nxt = best + e[:, t]
            valid = mask[:, t].unsqueeze(1)
            delta = torch.where(valid, nxt, delta)
            # identity pointer on padded steps so backtracking passes through
            ident = torch.arange(L).expand_as(idx)
            pointers.append(torch.where(valid, idx, ident))
        final = delta + A[:L, L + 1]
        last = final.argmax(dim=1)
        lengths = mask.sum(1).tolist()
        paths = []
        ptrs = torch.stack(pointers, 1).tolist() if pointers else None
        for b in range(e.shape[0]):
            y = [int(last[b])]
            for t in range(e.shape[1] - 2, -1, -1):
                y.append(ptrs[b][t][y[-1]])
            y.reverse()
            paths.append(y[: lengths[b]])
    return paths[0] if single else paths


def crf_brute_force(emissions, A, mask, limit=10 ** 6):
    """Exact ``(log Z, best path)`` by enumerating every labeling of one sequence."""
    e = [[float(v) for v in row] for row in emissions.tolist()]
    m = [bool(v) for v in mask.tolist()]
    if not any(m):
        raise ValueError("empty mask")
    T = sum(m)
    L = len(e[0])
    if L ** T > limit:
        raise ValueError(f"{L}^{T} labelings exceed the enumeration limit")
    a = [[float(v) for v in row] for row in A.tolist()]
    start, end = L, L + 1
    scores = []
    best, best_score = None, -math.inf
    for y in itertools.product(range(L), repeat=T):
        s = a[start][y[0]] + e[0][y[0]] + a[y[-1]][end]
        for t in range(1, T):
            s += a[y[t - 1]][y[t]] + e[t][y[t]]
        scores.append(s)
        if s > best_score:
            best, best_score = list(y), s
    top = max(scores)
    logz = top + math.log(math.fsum(math.exp(s - top) for s in scores))
    return logz, best
