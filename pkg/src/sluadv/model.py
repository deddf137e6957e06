"""Standard joint IC/SF model and the language-adversarial variant."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .corpus import PAD_ID, Corpus, Vocabulary, normalize
from .decoders import (IcDecoder, LangHead, SfDecoder, crf_neg_log_likelihood, crf_viterbi)
from .encoders import BertLikeEncoder, CnnEncoder, EncoderOutput
from .nn import load_checkpoint, softmax_xent


class InventoryError(ValueError):
    """A label in the data is missing from the model's closed label inventory."""


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 32
    d_cnn: int = 128
    ffn_hidden: int = 128
    encoder_dropout: float = 0.1
    ic_dropout: float = 0.5
    sf_dropout: float = 0.2
    lang_dropout: float = 0.5

    @classmethod
    def parity(cls) -> "ModelConfig":
        """Dimensions of the full-size setting (768-wide encoder and heads, 512-wide CNNs)."""
        return cls(d_model=768, n_layers=12, n_heads=12, d_ff=3072, max_len=128, d_cnn=512, ffn_hidden=768)


@dataclass
class LossWeights:
    alpha_d: float = 1.0
    alpha_i: float = 1.0
    alpha_s: float = 1.0
    alpha_p: float = 1.0
    beta_d: float = 0.2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    @classmethod
    def for_languages(cls, n: int) -> "LossWeights":
        if n <= 2:
            return cls(1.0, 1.0, 0.5, 0.5, 0.2)
        return cls(1.0, 1.0, 1.0, 1.0, 0.2)


# -- encoding ------------------------------------------------------------------

@dataclass
class EncodedBatch:
    token_ids: torch.Tensor  # [B, T] long
    mask: torch.Tensor  # [B, T] bool
    intents: torch.Tensor  # [B]
    slots: torch.Tensor  # [B, T], 0 ("O") on padding
    languages: torch.Tensor  # [B]

    def __len__(self):
        return self.token_ids.shape[0]


def encode_corpus(c: Corpus, vocab: Vocabulary, strict=True) -> list[tuple]:
    """Integer-encode utterances as ``(token_ids, intent, slot_ids, language)``.

    Unknown tokens become UNK; unknown labels raise :class:`InventoryError`
    unless ``strict`` is false, in which case they map to -1.
    """
    out = []
    for u in c:
        ids = [vocab.token_to_id.get(normalize(t), 1) for t in u.tokens]
        try:
            intent = vocab.intent_to_id[u.intent]
            slots = [vocab.slot_to_id[s] for s in u.slots]
            lang = vocab.language_to_id.get(u.language, -1)
        except KeyError as e:
            if strict:
                raise InventoryError(f"utterance {u.id!r} ({u.language}): label {e.args[0]!r} "
                                     "not in the model's label inventory") from None
            intent = vocab.intent_to_id.get(u.intent, -1)
            slots = [vocab.slot_to_id.get(s, -1) for s in u.slots]
            lang = vocab.language_to_id.get(u.language, -1)
        out.append((ids, intent, slots, lang))
    return out


def make_batch(items) -> EncodedBatch:
    T = max(len(x[0]) for x in items)
    B = len(items)
    tok = np.full((B, T), PAD_ID, dtype=np.int64)
    slots = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for b, (ids, _, sl, _) in enumerate(items):
        tok[b, : len(ids)] = ids
        slots[b, : len(sl)] = sl
        mask[b, : len(ids)] = True
    return EncodedBatch(
        torch.from_numpy(tok),
        torch.from_numpy(mask),
        torch.tensor([x[1] for x in items], dtype=torch.long),
        torch.from_numpy(slots),
        torch.tensor([x[3] for x in items], dtype=torch.long),
    )


def batches(items, size):
    for i in range(0, len(items), size):
        yield make_batch(items[i:i + size])


# -- outputs and losses --------------------------------------------------------

@dataclass
class ModelOutputs:
    intent_logits: torch.Tensor
    emissions: torch.Tensor
    p_predictor: torch.Tensor | None = None
    p_discriminator: torch.Tensor | None = None
    predictor_logits: torch.Tensor | None = None
    discriminator_logits: torch.Tensor | None = None

    @property
    def p_intent(self):
        return torch.softmax(self.intent_logits, dim=-1)


def _xent_from_probs(p, target):
    return -torch.log(p.gather(-1, target.unsqueeze(-1)).squeeze(-1))


def intent_loss(out: ModelOutputs, batch: EncodedBatch):
    return softmax_xent(out.intent_logits, batch.intents)[1].mean()


def slot_loss(out: ModelOutputs, batch: EncodedBatch, transitions):
    return crf_neg_log_likelihood(out.emissions, transitions, batch.slots, batch.mask).mean()


def language_loss(logits, batch: EncodedBatch):
    if logits.shape[-1] == 1:
        # one language: the true class always has probability 1
        return (logits * 0).sum()
    return softmax_xent(logits, batch.languages)[1].mean()


def loss_task1(out: ModelOutputs, true_lang, w: LossWeights):
    """Discriminator objective ``alpha_d * L_d`` (mean over the batch)."""
    if out.discriminator_logits is not None:
        ld = softmax_xent(out.discriminator_logits, true_lang)[1]
    else:
        ld = _xent_from_probs(out.p_discriminator, torch.as_tensor(true_lang))
    return w.alpha_d * ld.mean()


def loss_task2(out: ModelOutputs, batch: EncodedBatch, transitions, w: LossWeights, parts=False):
    """``alpha_i L_i + alpha_s L_s + alpha_p L_p - beta_d L_d``; optionally with the components."""
    li = intent_loss(out, batch)
    ls = slot_loss(out, batch, transitions)
    lp = language_loss(out.predictor_logits, batch)
    ld = language_loss(out.discriminator_logits, batch)
    total = w.alpha_i * li + w.alpha_s * ls + w.alpha_p * lp - w.beta_d * ld
    if parts:
        return total, {"L_i": li, "L_s": ls, "L_p": lp, "L_d": ld}
    return total


# -- models --------------------------------------------------------------------

class SluModel(nn.Module):
    """Shared plumbing: vocabulary, parameter groups, decoding."""

    variant = "base"

    def group_of(self, name: str) -> str:
        parts = name.split(".")
        return ".".join(parts[:2]) if parts[0] == "enc_l" else parts[0]

    def param_groups(self) -> dict[str, dict[str, torch.Tensor]]:
        groups: dict[str, dict[str, torch.Tensor]] = {}
        for name, p in self.named_parameters():
            groups.setdefault(self.group_of(name), {})[name] = p
        return groups

    def check_vocab(self, vocab: Vocabulary):
        for name in ("intent_to_id", "slot_to_id"):
            if getattr(vocab, name) != getattr(self.vocab, name):
                raise InventoryError(f"{name} differs from the model's label inventory")

    @torch.no_grad()
    def predict(self, batch: EncodedBatch):
        """Eval-mode ``(intent ids, slot id paths)`` for a batch."""
        out = self(batch, train=False)
        intents = out.intent_logits.argmax(-1).tolist()
        paths = crf_viterbi(out.emissions, self.sf.transitions, batch.mask)
        return intents, paths

    def describe(self) -> dict:
        return {"variant": self.variant, "config": asdict(self.config), "vocab": self.vocab.to_dict()}


class StandardModel(SluModel):
    variant = "standard"

    def __init__(self, vocab: Vocabulary, config: ModelConfig | None = None, dtype=torch.float64):
        super().__init__()
        self.vocab = vocab
        self.config = cfg = config or ModelConfig()
        self.enc_bert = BertLikeEncoder(len(vocab.token_to_id), cfg.d_model, cfg.n_layers, cfg.n_heads,
                                        cfg.d_ff, cfg.max_len, cfg.encoder_dropout, dtype)
        self.ic = IcDecoder(cfg.d_model, len(vocab.intent_to_id), cfg.ffn_hidden, cfg.ic_dropout, dtype)
        self.sf = SfDecoder(cfg.d_model, len(vocab.slot_to_id), cfg.ffn_hidden, cfg.sf_dropout, dtype)

    def forward(self, batch: EncodedBatch, train=False) -> ModelOutputs:
        enc = self.enc_bert(batch.token_ids, batch.mask, train)
        return ModelOutputs(self.ic.logits(enc.sentence_rep, train), self.sf(enc.token_reps, train))

    def loss(self, batch: EncodedBatch, train=False, parts=False):
        out = self(batch, train)
        li = intent_loss(out, batch)
        ls = slot_loss(out, batch, self.sf.transitions)
        total = li + ls
        return (total, {"L_i": li, "L_s": ls}) if parts else total


def combine_representations(per_lang: list[EncoderOutput], p_pred, shared: EncoderOutput):
    """Mix language-specific encoders by ``p_pred`` and concatenate the shared encoder.

    ``p_pred`` is ``[B, N]``; returns ``(h_combined [B, T, 2d], s_combined [B, 2d])``.
    """
    if len(per_lang) != p_pred.shape[-1]:
        raise ValueError(f"{len(per_lang)} language encoders but {p_pred.shape[-1]} predictor classes")
    for e in per_lang:
        if e.token_reps.shape != shared.token_reps.shape:
            raise ValueError("encoder outputs disagree in shape")
    h_stack = torch.stack([e.token_reps for e in per_lang], dim=-1)  # [B, T, d, N]
    s_stack = torch.stack([e.sentence_rep for e in per_lang], dim=-1)  # [B, d, N]
    h_specific = (h_stack * p_pred[:, None, None, :]).sum(-1)
    s_specific = (s_stack * p_pred[:, None, :]).sum(-1)
    return (torch.cat([h_specific, shared.token_reps], dim=-1),
            torch.cat([s_specific, shared.sentence_rep], dim=-1))


class AdversarialModel(SluModel):
    """Shared transformer, N language CNNs, language/shared CNNs, four heads."""

    variant = "adversarial"
    DISCRIMINATOR = "discriminator"

    def __init__(self, vocab: Vocabulary, config: ModelConfig | None = None, dtype=torch.float64):
        super().__init__()
        self.vocab = vocab
        self.config = cfg = config or ModelConfig()
        n = len(vocab.language_to_id)
        d, c = cfg.d_model, cfg.d_cnn
        self.enc_bert = BertLikeEncoder(len(vocab.token_to_id), d, cfg.n_layers, cfg.n_heads,
                                        cfg.d_ff, cfg.max_len, cfg.encoder_dropout, dtype)
        self.enc_l = nn.ModuleList(CnnEncoder(d, c, dtype) for _ in range(n))
        self.enc_lang = CnnEncoder(d, c, dtype)
        self.enc_shared = CnnEncoder(d, c, dtype)
        self.predictor = LangHead(c, n, cfg.ffn_hidden, cfg.lang_dropout, dtype)
        self.discriminator = LangHead(c, n, cfg.ffn_hidden, cfg.lang_dropout, dtype)
        self.ic = IcDecoder(2 * c, len(vocab.intent_to_id), cfg.ffn_hidden, cfg.ic_dropout, dtype)
        self.sf = SfDecoder(2 * c, len(vocab.slot_to_id), cfg.ffn_hidden, cfg.sf_dropout, dtype)
        self._census(n)

    def _census(self, n):
        count = lambda m: sum(p.numel() for p in m.parameters())
        cnn = count(self.enc_shared)
        expected = (count(self.enc_bert) + (n + 2) * cnn + count(self.predictor)
                    + count(self.discriminator) + count(self.ic) + count(self.sf))
        assert count(self) == expected, "adversarial model parameter census mismatch"
        assert len(self.enc_l) + 3 == n + 3

    @property
    def n_encoders(self):
        return 1 + len(self.enc_l) + 2

    def discriminator_params(self) -> set[str]:
        return set(self.param_groups()[self.DISCRIMINATOR])

    def encode(self, batch: EncodedBatch, train=False):
        enc = self.enc_bert(batch.token_ids, batch.mask, train)
        per_lang = [e(enc.token_reps, batch.mask) for e in self.enc_l]
        lang = self.enc_lang(enc.token_reps, batch.mask)
        shared = self.enc_shared(enc.token_reps, batch.mask)
        return per_lang, lang, shared

    def forward(self, batch: EncodedBatch, train=False) -> ModelOutputs:
        per_lang, lang, shared = self.encode(batch, train)
        pred_logits = self.predictor.logits(lang.sentence_rep, train)
        disc_logits = self.discriminator.logits(shared.sentence_rep, train)
        p_pred = torch.softmax(pred_logits, dim=-1)
        h, s = combine_representations(per_lang, p_pred, shared)
        return ModelOutputs(
            intent_logits=self.ic.logits(s, train),
            emissions=self.sf(h, train),
            p_predictor=p_pred,
            p_discriminator=torch.softmax(disc_logits, dim=-1),
            predictor_logits=pred_logits,
            discriminator_logits=disc_logits,
        )

    def discriminator_forward(self, batch: EncodedBatch, train=False):
        """Discriminator logits with everything upstream held constant."""
        with torch.no_grad():
            enc = self.enc_bert(batch.token_ids, batch.mask, train)
            shared = self.enc_shared(enc.token_reps, batch.mask)
        return self.discriminator.logits(shared.sentence_rep, train)

    def loss(self, batch: EncodedBatch, weights: LossWeights, train=False, parts=False):
        return loss_task2(self(batch, train), batch, self.sf.transitions, weights, parts)


def standard_forward(batch, m: StandardModel, train=False) -> ModelOutputs:
    return m(batch, train)


def adversarial_forward(batch, m: AdversarialModel, train=False) -> ModelOutputs:
    return m(batch, train)


def build_model(variant: str, vocab: Vocabulary, config: ModelConfig | None = None, dtype=torch.float64):
    if variant in ("standard", "standard-mono", "standard-multi"):
        return StandardModel(vocab, config, dtype)
    if variant == "adversarial":
        return AdversarialModel(vocab, config, dtype)
    raise ValueError(f"unknown model variant {variant!r}")


def load_model(path, dtype=torch.float64):
    """Rebuild a model from a checkpoint written during training; returns ``(model, meta)``."""
    groups, _, _, meta = load_checkpoint(path)
    for key in ("variant", "config", "vocab"):
        if key not in meta:
            raise ValueError(f"{path}: checkpoint metadata lacks {key!r}")
    model = build_model(meta["variant"], Vocabulary.from_dict(meta["vocab"]), ModelConfig(**meta["config"]), dtype)
    state = {name: t.to(dtype) for tensors in groups.values() for name, t in tensors.items()}
    missing = set(dict(model.named_parameters())) ^ set(state)
    if missing:
        raise ValueError(f"{path}: parameter names do not match the model: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.eval()
    return model, meta
