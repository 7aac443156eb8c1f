"""Connection-aware masked-LM fine-tuning over serialized triples.

A triple is written as one sentence ``[CLS] head relation tail [SEP]``; the
backend's per-token outputs are mean-pooled over each of the three spans and
trained with a hyperplane margin loss plus the masked-token loss. Any encoder
that maps token ids to ``(hidden_states, vocab_logits)`` can serve as the
backend: :class:`TinyEncoder` at desk scale, or a pretrained checkpoint via
:func:`load_pretrained`.
"""

from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .hyperplane import corrupt_batch, margin_loss, normalize_rows, renormalize_, triple_distance

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")


# ---------------------------------------------------------------------------
# tokenization


def basic_split(text, lowercase=True):
    """Whitespace split with punctuation isolated into its own tokens."""
    if lowercase:
        text = unicodedata.normalize("NFKD", text.lower())
        text = "".join(c for c in text if not unicodedata.combining(c))
    out = []
    for word in text.split():
        out.extend(t for t in re.split(r"([^\w]|_)", word) if t)
    return out


class WordPieceTokenizer:
    """Greedy longest-match sub-word tokenizer over a plain ``vocab.txt`` list."""

    def __init__(self, vocab, lowercase=True):
        vocab = list(vocab)
        missing = [t for t in SPECIAL_TOKENS if t not in vocab]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        self.vocab = vocab
        self.ids = {t: k for k, t in enumerate(vocab)}
        self.lowercase = lowercase
        self.pad_id, self.unk_id, self.cls_id, self.sep_id, self.mask_id = (
            self.ids[t] for t in SPECIAL_TOKENS
        )
        self.special_ids = frozenset(self.ids[t] for t in SPECIAL_TOKENS)
        self.regular_ids = np.array(
            [k for k in range(len(vocab)) if k not in self.special_ids], dtype=np.int64
        )

    @classmethod
    def from_names(cls, names, lowercase=True):
        """Vocabulary of every word in ``names`` plus single-character pieces."""
        words, chars = set(), set()
        for name in names:
            for w in basic_split(name, lowercase):
                words.add(w)
                chars.update(w)
        pieces = sorted(chars) + ["##" + c for c in sorted(chars)]
        vocab = list(SPECIAL_TOKENS) + sorted(words - set(pieces)) + pieces
        return cls(vocab, lowercase)

    @classmethod
    def load(cls, path, lowercase=True):
        return cls(Path(path).read_text(encoding="utf-8").splitlines(), lowercase)

    def save(self, path):
        Path(path).write_text("\n".join(self.vocab) + "\n", encoding="utf-8")

    @property
    def vocab_size(self):
        return len(self.vocab)

    def _wordpiece(self, word):
        pieces, start = [], 0
        while start < len(word):
            end = len(word)
            while end > start:
                sub = word[start:end] if start == 0 else "##" + word[start:end]
                if sub in self.ids:
                    pieces.append(self.ids[sub])
                    break
                end -= 1
            else:
                return [self.unk_id]
            start = end
        return pieces

    def encode(self, text):
        ids = []
        for w in basic_split(text, self.lowercase):
            ids.extend(self._wordpiece(w))
        return ids


# ---------------------------------------------------------------------------
# triple sentences


@dataclass(frozen=True)
class TripleSentence:
    """Token ids for ``[CLS] head relation tail [SEP]`` with span bookkeeping.

    ``spans`` are half-open ``(start, end)`` ranges for head, relation and
    tail. ``mask_positions``/``mask_labels`` record tokens chosen by
    :func:`apply_masking` and their original ids.
    """

    token_ids: tuple
    spans: tuple
    mask_positions: tuple = ()
    mask_labels: tuple = ()

    def __len__(self):
        return len(self.token_ids)


def serialize_triple(triple, tokenizer, max_length=64):
    """Tokenize a triple; over-long inputs lose head tokens first, then tail tokens."""
    parts = []
    for name in (triple.head_name, triple.relation_name, triple.tail_name):
        if not name or not name.strip():
            raise ValueError(f"empty name in {triple!r}")
        ids = tokenizer.encode(name)
        if not ids:
            raise ValueError(f"name {name!r} produced no tokens")
        parts.append(ids)
    head, rel, tail = parts
    budget = max_length - 2
    excess = len(head) + len(rel) + len(tail) - budget
    if excess > 0:
        cut = min(excess, len(head) - 1)
        head = head[: len(head) - cut]
        excess -= cut
    if excess > 0:
        cut = min(excess, len(tail) - 1)
        tail = tail[: len(tail) - cut]
        excess -= cut
    if excess > 0:
        raise ValueError(f"relation name of {triple!r} does not fit in max_length={max_length}")
    a = 1
    b = a + len(head)
    c = b + len(rel)
    d = c + len(tail)
    ids = [tokenizer.cls_id, *head, *rel, *tail, tokenizer.sep_id]
    return TripleSentence(tuple(ids), ((a, b), (b, c), (c, d)))


def apply_masking(sentence, rate, rng, tokenizer):
    """Select interior tokens with probability ``rate``; 80/10/10 mask/random/keep."""
    if not 0 < rate < 1:
        raise ValueError("masking rate must lie in (0, 1)")
    ids = np.array(sentence.token_ids)
    interior = np.arange(1, len(ids) - 1)
    chosen = interior[rng.random(len(interior)) < rate]
    labels = ids[chosen].copy()
    action = rng.random(len(chosen))
    random_ids = tokenizer.regular_ids[rng.integers(len(tokenizer.regular_ids), size=len(chosen))]
    ids[chosen[action < 0.8]] = tokenizer.mask_id
    swap = (action >= 0.8) & (action < 0.9)
    ids[chosen[swap]] = random_ids[swap]
    return TripleSentence(
        tuple(ids.tolist()), sentence.spans, tuple(chosen.tolist()), tuple(labels.tolist())
    )


def pool_components(outputs, sentence):
    """Mean of the backend outputs over the head, relation and tail spans."""
    if len(outputs) != len(sentence):
        raise ValueError("need exactly one output vector per token")
    pooled = []
    for start, end in sentence.spans:
        if end <= start:
            raise ValueError("empty span")
        pooled.append(outputs[start:end].mean(0))
    return tuple(pooled)


@dataclass
class SentenceBatch:
    token_ids: torch.Tensor
    attention_mask: torch.Tensor
    span_weights: torch.Tensor
    mask_rows: torch.Tensor
    mask_cols: torch.Tensor
    mask_labels: torch.Tensor


def collate(sentences, pad_id):
    """Pad sentences into tensors; span means become a (B, 3, T) weight matrix."""
    n = len(sentences)
    width = max(len(s) for s in sentences)
    ids = torch.full((n, width), pad_id, dtype=torch.long)
    att = torch.zeros((n, width), dtype=torch.bool)
    weights = torch.zeros((n, 3, width))
    rows, cols, labels = [], [], []
    for b, s in enumerate(sentences):
        ids[b, : len(s)] = torch.tensor(s.token_ids)
        att[b, : len(s)] = True
        for k, (start, end) in enumerate(s.spans):
            weights[b, k, start:end] = 1.0 / (end - start)
        rows += [b] * len(s.mask_positions)
        cols += list(s.mask_positions)
        labels += list(s.mask_labels)
    return SentenceBatch(
        ids, att, weights,
        torch.tensor(rows, dtype=torch.long),
        torch.tensor(cols, dtype=torch.long),
        torch.tensor(labels, dtype=torch.long),
    )


# ---------------------------------------------------------------------------
# backends


class TinyEncoder(nn.Module):
    """Small randomly initialised transformer masked-LM with the backend contract."""

    def __init__(self, vocab_size, hidden_size=64, num_layers=2, num_heads=4,
                 max_length=128, dropout=0.0):
        super().__init__()
        self.hidden_size = hidden_size
        self.vocab_size = vocab_size
        self.tokens = nn.Embedding(vocab_size, hidden_size)
        self.positions = nn.Embedding(max_length, hidden_size)
        self.norm = nn.LayerNorm(hidden_size)
        layer = nn.TransformerEncoderLayer(
            hidden_size, num_heads, dim_feedforward=4 * hidden_size,
            dropout=dropout, batch_first=True, activation="gelu",
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers, enable_nested_tensor=False)
        self.lm_head = nn.Linear(hidden_size, vocab_size)

    def forward(self, token_ids, attention_mask):
        pos = torch.arange(token_ids.shape[1], device=token_ids.device)
        x = self.norm(self.tokens(token_ids) + self.positions(pos)[None])
        h = self.encoder(x, src_key_padding_mask=~attention_mask)
        return h, self.lm_head(h)


class PretrainedMaskedLM(nn.Module):
    """Adapter for a Hugging Face masked-LM checkpoint directory."""

    def __init__(self, model):
        super().__init__()
        self.model = model
        self.hidden_size = model.config.hidden_size
        self.vocab_size = model.config.vocab_size

    def forward(self, token_ids, attention_mask):
        out = self.model(
            input_ids=token_ids, attention_mask=attention_mask.long(), output_hidden_states=True
        )
        return out.hidden_states[-1], out.logits


class PretrainedTokenizer:
    """Tokenizer adapter exposing the attributes the serializer relies on."""

    def __init__(self, tok):
        self.tok = tok
        self.pad_id, self.unk_id = tok.pad_token_id, tok.unk_token_id
        self.cls_id, self.sep_id, self.mask_id = tok.cls_token_id, tok.sep_token_id, tok.mask_token_id
        self.special_ids = frozenset(tok.all_special_ids)
        self.vocab_size = len(tok)
        self.regular_ids = np.array(
            [k for k in range(self.vocab_size) if k not in self.special_ids], dtype=np.int64
        )

    def encode(self, text):
        return self.tok(text, add_special_tokens=False)["input_ids"]


def load_pretrained(path):
    """``(backend, tokenizer)`` from a checkpoint directory (vocab + weights)."""
    from transformers import AutoModelForMaskedLM, AutoTokenizer

    model = AutoModelForMaskedLM.from_pretrained(path)
    return PretrainedMaskedLM(model), PretrainedTokenizer(AutoTokenizer.from_pretrained(path))


# ---------------------------------------------------------------------------
# model and losses


class SemanticModel(nn.Module):
    """Backend plus one learnable unit hyperplane normal per relation."""

    def __init__(self, backend, n_relations):
        super().__init__()
        self.backend = backend
        planes = torch.randn(n_relations, backend.hidden_size)
        self.relation_planes = nn.Parameter(normalize_rows(planes))

    def forward(self, batch):
        hidden, logits = self.backend(batch.token_ids, batch.attention_mask)
        parts = torch.einsum("bkt,bth->bkh", batch.span_weights.to(hidden.dtype), hidden)
        return parts, logits

    def renormalize(self):
        renormalize_(self.relation_planes)


def connection_loss(pos_parts, pos_planes, neg_parts, neg_planes, margin=1.0):
    """Mean hinge between positive and corrupted hyperplane distances.

    ``*_parts`` are (B, 3, H) pooled head/relation/tail vectors.
    """
    pos = triple_distance(pos_parts[:, 0], pos_parts[:, 1], pos_parts[:, 2], pos_planes)
    neg = triple_distance(neg_parts[:, 0], neg_parts[:, 1], neg_parts[:, 2], neg_planes)
    return margin_loss(pos, neg, margin).mean()


def masked_lm_loss(logits, rows, cols, labels):
    """Mean cross-entropy over masked positions; zero when nothing was masked."""
    if len(labels) == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits[rows, cols], labels)


@dataclass
class SemanticLoss:
    connection: torch.Tensor
    masked: torch.Tensor

    @property
    def total(self):
        return self.connection + self.masked


def semantic_loss(model, pos_batch, pos_rel, neg_batch, neg_rel, margin=1.0):
    """Joint loss for paired positive (masked) and corrupted sentence batches."""
    pos_parts, logits = model(pos_batch)
    neg_parts, _ = model(neg_batch)
    planes = model.relation_planes
    l_c = connection_loss(pos_parts, planes[pos_rel], neg_parts, planes[neg_rel], margin)
    l_m = masked_lm_loss(logits, pos_batch.mask_rows, pos_batch.mask_cols, pos_batch.mask_labels)
    return SemanticLoss(l_c, l_m)


@dataclass
class SemanticConfig:
    epochs: int = 1
    learning_rate: float = 3e-5
    weight_decay: float = 0.01
    batch_size: int = 32
    mask_rate: float = 0.15
    max_length: int = 64
    margin: float = 1.0
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_steps: int = 0


class SentenceCache:
    """Memoised serialization keyed by (h, r, t) ids."""

    def __init__(self, kg, tokenizer, max_length):
        self.kg, self.tokenizer, self.max_length = kg, tokenizer, max_length
        self._cache = {}

    def __call__(self, h, r, t):
        key = (int(h), int(r), int(t))
        s = self._cache.get(key)
        if s is None:
            s = self._cache[key] = serialize_triple(self.kg.make_triple(*key), self.tokenizer, self.max_length)
        return s


def fine_tune(model, kg, tokenizer, config=None, seed=0):
    """Fine-tune ``model`` on every triple of ``kg``; returns per-step loss rows."""
    config = config or SemanticConfig()
    rng = np.random.default_rng(seed)
    cache = SentenceCache(kg, tokenizer, config.max_length)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    history = []
    model.train()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(kg))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            h, r, t = kg.heads[idx], kg.relations[idx], kg.tails[idx]
            nh, nr, nt, _ = corrupt_batch(h, r, t, kg, rng)
            pos = [apply_masking(cache(*x), config.mask_rate, rng, tokenizer) for x in zip(h, r, t)]
            neg = [cache(*x) for x in zip(nh, nr, nt)]
            loss = semantic_loss(
                model, collate(pos, tokenizer.pad_id), torch.as_tensor(r),
                collate(neg, tokenizer.pad_id), torch.as_tensor(nr), config.margin,
            )
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            model.renormalize()
            history.append(
                {"epoch": epoch + 1, "step": step + 1, "L_c": loss.connection.item(),
                 "L_m": loss.masked.item(), "L_g": loss.total.item()}
            )
            step += 1
            if config.max_steps and step >= config.max_steps:
                return history
    return history


@dataclass
class SemanticTable:
    entity_vectors: np.ndarray
    relation_vectors: np.ndarray
    relation_planes: np.ndarray
    entity_seen: np.ndarray = field(default=None, repr=False)

    @property
    def dim(self):
        return self.entity_vectors.shape[1]


@torch.no_grad()
def export_semantic_table(model, kg, tokenizer, batch_size=128, max_length=64):
    """Per-entity and per-relation means of pooled span vectors over all triples."""
    was_training = model.training
    model.eval()
    cache = SentenceCache(kg, tokenizer, max_length)
    dim = model.backend.hidden_size
    ent_sum = torch.zeros(kg.n_entities, dim, dtype=torch.float64)
    ent_cnt = torch.zeros(kg.n_entities, dtype=torch.float64)
    rel_sum = torch.zeros(kg.n_relations, dim, dtype=torch.float64)
    rel_cnt = torch.zeros(kg.n_relations, dtype=torch.float64)
    for start in range(0, len(kg), batch_size):
        sl = slice(start, start + batch_size)
        h, r, t = kg.heads[sl], kg.relations[sl], kg.tails[sl]
        parts, _ = model(collate([cache(*x) for x in zip(h, r, t)], tokenizer.pad_id))
        parts = parts.double()
        for k, ids, acc, cnt in ((0, h, ent_sum, ent_cnt), (1, r, rel_sum, rel_cnt), (2, t, ent_sum, ent_cnt)):
            ids = torch.tensor(ids)
            acc.index_add_(0, ids, parts[:, k])
            cnt.index_add_(0, ids, torch.ones(len(ids), dtype=torch.float64))
    model.train(was_training)
    seen = (ent_cnt > 0).numpy()
    if not seen.all():
        logger.warning("%d entities occur in no triple; exported as zero vectors", int((~seen).sum()))
    ents = (ent_sum / ent_cnt.clamp_min(1)[:, None]).numpy()
    rels = (rel_sum / rel_cnt.clamp_min(1)[:, None]).numpy()
    planes = model.relation_planes.detach().double().numpy().copy()
    return SemanticTable(ents, rels, planes, seen)


def build_semantic_model(kg, config=None, seed=0, tokenizer=None, backend=None):
    """Tokenizer + :class:`TinyEncoder` backed model for ``kg`` (desk-scale default)."""
    config = config or SemanticConfig()
    torch.manual_seed(seed)
    if tokenizer is None:
        tokenizer = WordPieceTokenizer.from_names(kg.entity_names + kg.relation_names)
    if backend is None:
        backend = TinyEncoder(
            tokenizer.vocab_size, config.hidden_size, config.num_layers, config.num_heads,
            max_length=max(config.max_length, 8),
        )
    return SemanticModel(backend, kg.n_relations), tokenizer
