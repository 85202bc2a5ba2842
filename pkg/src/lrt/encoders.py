"""Toy visual/text encoders, context prompts, prototypes and CutMix."""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DomainError
from .numerics import Tensor

PROMPT_INIT_STD = 0.02
MIX_RATIO = (0.4, 0.6)


# ---------------------------------------------------------------------------
# visual side
# ---------------------------------------------------------------------------


@dataclass
class VisualEncoder:
    """Shared per-patch affine map followed by ReLU; pooled by the spatial mean."""

    W_enc: Tensor
    b_enc: Tensor
    trainable: bool = True

    @classmethod
    def init(cls, rng, d_raw, d_v):
        w = rng.normal(size=(d_raw, d_v)) / math.sqrt(d_raw)
        b = np.full(d_v, 0.05)
        return cls(nx.parameter(w, "W_enc"), nx.parameter(b, "b_enc"))

    @property
    def d_raw(self):
        return self.W_enc.shape[0]

    @property
    def d_v(self):
        return self.W_enc.shape[1]

    def set_trainable(self, flag):
        self.trainable = flag
        self.W_enc.requires_grad = flag
        self.b_enc.requires_grad = flag

    def parameters(self):
        return {"W_enc": self.W_enc, "b_enc": self.b_enc}


def encode_image(x, enc: VisualEncoder):
    """Encode one (H, W, D_raw) grid; returns ``(feature_map (H, W, D_V), pooled (D_V,))``.

    Built from plain tape primitives; :func:`encode_batch` is the fused fast path.
    """
    x = nx.as_tensor(x)
    if x.ndim != 3 or x.shape[2] != enc.d_raw:
        raise ContractError(f"image of shape {x.shape} does not match encoder input dim {enc.d_raw}")
    H, W, _ = x.shape
    flat = nx.reshape(x, (H * W, enc.d_raw))
    act = nx.relu(nx.add(nx.matmul(flat, enc.W_enc), enc.b_enc))
    return nx.reshape(act, (H, W, enc.d_v)), nx.mean(act, axis=0)


def encode_batch(images, enc: VisualEncoder):
    """Pooled features for a stack of grids (N, H, W, D_raw) -> (N, D_V)."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if images.ndim != 4 or images.shape[3] != enc.d_raw:
        raise ContractError(f"image stack of shape {images.shape} does not match encoder input dim {enc.d_raw}")
    n, H, W, d = images.shape
    return nx.patch_encode(images.reshape(n, H * W, d), enc.W_enc, enc.b_enc)


def class_prototype(samples, enc: VisualEncoder):
    """Mean pooled feature over the samples of one class (a plain array)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 4 or len(samples) == 0:
        raise ContractError("class_prototype needs a non-empty (n, H, W, D_raw) stack")
    return encode_batch(samples, enc).data.mean(axis=0)


# ---------------------------------------------------------------------------
# text side
# ---------------------------------------------------------------------------


def _text_projection(rng, d_tok, d_t):
    # sign-split [R, -R]/sqrt(2) lets non-negative features reproduce signed text geometry
    if d_t % 2 == 0 and d_t // 2 >= d_tok:
        q, _ = np.linalg.qr(rng.normal(size=(d_t // 2, d_tok)))
        r = q.T
        return np.concatenate([r, -r], axis=1) / math.sqrt(2.0)
    if d_t >= d_tok:
        q, _ = np.linalg.qr(rng.normal(size=(d_t, d_tok)))
        return q.T.copy()
    q, _ = np.linalg.qr(rng.normal(size=(d_tok, d_t)))
    return q


@dataclass
class TextEncoder:
    """Frozen token table and projection; mean-pool, project, L2-normalise."""

    token_table: Tensor
    projection: Tensor
    templates: List[np.ndarray] = field(default_factory=lambda: [np.zeros((0, 1))])

    @classmethod
    def init(cls, rng, token_table, d_t, n_templates=1, template_std=0.1):
        token_table = np.asarray(token_table, dtype=np.float64)
        d_tok = token_table.shape[1]
        proj = _text_projection(rng, d_tok, d_t)
        templates = [np.zeros((0, d_tok))]
        for _ in range(n_templates - 1):
            templates.append(template_std * rng.normal(size=(1, d_tok)))
        return cls(Tensor(token_table, name="token_table"), Tensor(proj, name="projection"), templates)

    @property
    def d_tok(self):
        return self.token_table.shape[1]

    @property
    def d_t(self):
        return self.projection.shape[1]

    def embed(self, tokens):
        return self.token_table.data[np.asarray(tokens, dtype=np.intp)]


def encode_text(sequence, text: TextEncoder):
    """``normalize(mean(sequence) @ projection)`` for one (L, d_tok) sequence."""
    sequence = nx.as_tensor(sequence)
    if sequence.ndim != 2 or sequence.shape[0] < 1:
        raise ContractError("encode_text needs a non-empty (L, d_tok) sequence")
    z = nx.matmul(nx.mean(sequence, axis=0), text.projection)
    if not np.any(z.data):
        raise DomainError("encode_text: projected mean embedding is the zero vector")
    return nx.l2_normalize(z)


def encode_text_batch(sequences, text: TextEncoder):
    """Row-wise :func:`encode_text` for a (N, L, d_tok) stack."""
    sequences = nx.as_tensor(sequences)
    z = nx.matmul(nx.mean(sequences, axis=1), text.projection)
    if np.any(~z.data.any(axis=1)):
        raise DomainError("encode_text: projected mean embedding is the zero vector")
    return nx.l2_normalize(z)


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------


class PromptBank:
    """Per-class learnable prefix / suffix token embeddings around the class-name tokens."""

    def __init__(self, prefix_len, suffix_len, d_tok):
        if prefix_len < 0 or suffix_len < 0:
            raise ConfigError("prompt lengths must be non-negative")
        self.prefix_len = prefix_len
        self.suffix_len = suffix_len
        self.d_tok = d_tok
        self.prefix: Dict[int, Tensor] = {}
        self.suffix: Dict[int, Tensor] = {}

    def __contains__(self, c):
        return c in self.prefix

    def classes(self):
        return sorted(self.prefix)

    def register(self, c, rng, trainable=True):
        self.prefix[c] = Tensor(PROMPT_INIT_STD * rng.normal(size=(self.prefix_len, self.d_tok)),
                                requires_grad=trainable, name=f"prefix/{c}")
        self.suffix[c] = Tensor(PROMPT_INIT_STD * rng.normal(size=(self.suffix_len, self.d_tok)),
                                requires_grad=trainable, name=f"suffix/{c}")

    def set_trainable(self, classes, flag):
        for c in classes:
            self.prefix[c].requires_grad = flag
            self.suffix[c].requires_grad = flag

    def trainable_classes(self):
        return [c for c in self.classes() if self.prefix[c].requires_grad]

    def parameters(self, classes=None):
        out = {}
        for c in (self.classes() if classes is None else classes):
            out[f"prefix/{c}"] = self.prefix[c]
            out[f"suffix/{c}"] = self.suffix[c]
        return out

    def _get(self, c):
        if c not in self.prefix:
            raise KeyError(f"class {c} has no registered prompt")
        return self.prefix[c], self.suffix[c]


def assemble_prompt(c, bank: PromptBank, tokens, text: TextEncoder):
    """``[prefix_c, name tokens, suffix_c]`` as a (L_p + len(tokens) + L_s, d_tok) tensor."""
    pre, suf = bank._get(c)
    return nx.concat([pre, Tensor(text.embed(tokens)), suf], axis=0)


def assemble_mixed(i, j, bank: PromptBank, tokens_i, tokens_j, text: TextEncoder):
    """Concatenated prompt sentence of two classes."""
    return nx.concat([assemble_prompt(i, bank, tokens_i, text), assemble_prompt(j, bank, tokens_j, text)], axis=0)


def assemble_batch(groups, bank: PromptBank, names, text: TextEncoder):
    """Stacked prompt sentences, one per group of classes (all groups equally long).

    ``groups`` is a sequence of class tuples, e.g. ``[(3,), (5,)]`` or ``[(1, 4), (2, 0)]``;
    ``names`` maps class id -> token tuple.  Returns a (N, L, d_tok) tensor.
    """
    groups = [tuple(g) for g in groups]
    width = {len(g) for g in groups}
    if len(width) != 1:
        raise ContractError("assemble_batch needs groups of equal size")
    uniq = sorted({c for g in groups for c in g})
    slot = {c: k for k, c in enumerate(uniq)}
    pre = nx.stack([bank._get(c)[0] for c in uniq])
    suf = nx.stack([bank._get(c)[1] for c in uniq])
    pieces = []
    for pos in range(width.pop()):
        idx = np.array([slot[g[pos]] for g in groups])
        toks = text.embed([names[g[pos]] for g in groups])
        pieces += [nx.take(pre, idx), Tensor(toks), nx.take(suf, idx)]
    return nx.concat(pieces, axis=1)


def text_prototype(c, bank: PromptBank, tokens, text: TextEncoder):
    """Mean over the K registered templates of the encoded class prompt."""
    if not text.templates:
        raise ContractError("text encoder has no prompt templates")
    base = assemble_prompt(c, bank, tokens, text)
    encs = []
    for tpl in text.templates:
        seq = base if len(tpl) == 0 else nx.concat([base, Tensor(tpl)], axis=0)
        encs.append(encode_text(seq, text))
    return encs[0] if len(encs) == 1 else nx.mean(nx.stack(encs), axis=0)


def text_prototypes(classes, bank: PromptBank, names, text: TextEncoder):
    """Batched :func:`text_prototype` -> (len(classes), D_T) tensor."""
    if not text.templates:
        raise ContractError("text encoder has no prompt templates")
    seqs = assemble_batch([(c,) for c in classes], bank, names, text)
    encs = []
    for tpl in text.templates:
        if len(tpl) == 0:
            encs.append(encode_text_batch(seqs, text))
        else:
            extra = Tensor(np.broadcast_to(tpl, (len(classes),) + tpl.shape).copy())
            encs.append(encode_text_batch(nx.concat([seqs, extra], axis=1), text))
    return encs[0] if len(encs) == 1 else nx.mean(nx.stack(encs), axis=0)


# ---------------------------------------------------------------------------
# prototypes
# ---------------------------------------------------------------------------


class PrototypeStore:
    """Visual prototype blocks (one per session) plus the cached text prototypes.

    The base block is a trainable parameter during the base session; incremental
    blocks are frozen class means.
    """

    def __init__(self, d_v):
        self.d_v = d_v
        self.blocks: List[Tensor] = []
        self.block_classes: List[List[int]] = []
        self.text: Optional[np.ndarray] = None

    @property
    def classes(self):
        return [c for blk in self.block_classes for c in blk]

    @property
    def sessions(self):
        return [s + 1 for s, blk in enumerate(self.block_classes) for _ in blk]

    def add_block(self, classes, rows, trainable):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape != (len(classes), self.d_v):
            raise ContractError("prototype block shape does not match its class list")
        self.blocks.append(Tensor(rows, requires_grad=trainable, name=f"V/{len(self.blocks) + 1}"))
        self.block_classes.append(list(classes))

    def visual(self):
        """All visual prototypes as one (|C|, D_V) tensor (on tape when a block is trainable)."""
        if not self.blocks:
            raise ContractError("no visual prototypes registered")
        return self.blocks[0] if len(self.blocks) == 1 else nx.concat(self.blocks, axis=0)

    def visual_array(self):
        return np.concatenate([b.data for b in self.blocks], axis=0)


# ---------------------------------------------------------------------------
# CutMix
# ---------------------------------------------------------------------------


def feasible_shapes(H, W, ratio=MIX_RATIO):
    """All (h, w) rectangle shapes whose area ratio lies in ``ratio``."""
    lo, hi = ratio
    shapes = [(h, w) for h in range(1, H + 1) for w in range(1, W + 1) if lo <= h * w / (H * W) <= hi]
    if not shapes:
        raise ConfigError(f"a {H}x{W} grid has no rectangle with area ratio in [{lo}, {hi}]")
    return shapes


def sample_masks(rng, n, H, W, ratio=MIX_RATIO):
    """``n`` rectangular (H, W) boolean masks: uniform feasible shape, then uniform position."""
    shapes = np.array(feasible_shapes(H, W, ratio))
    pick = shapes[rng.integers(len(shapes), size=n)]
    hs, ws = pick[:, 0], pick[:, 1]
    top = rng.integers(0, H - hs + 1)
    left = rng.integers(0, W - ws + 1)
    rows = np.arange(H)[None, :, None]
    cols = np.arange(W)[None, None, :]
    return ((rows >= top[:, None, None]) & (rows < (top + hs)[:, None, None])
            & (cols >= left[:, None, None]) & (cols < (left + ws)[:, None, None]))


def cutmix(x_i, x_j, rng, ratio=MIX_RATIO):
    """Paste a random rectangle of ``x_i`` onto ``x_j``; returns ``(mixed, mask)``."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape or x_i.ndim != 3:
        raise ContractError("cutmix needs two (H, W, D) grids of identical shape")
    mask = sample_masks(rng, 1, x_i.shape[0], x_i.shape[1], ratio)[0]
    return np.where(mask[:, :, None], x_i, x_j), mask


def cutmix_batch(xa, xb, rng, ratio=MIX_RATIO):
    """Batched :func:`cutmix` over (N, H, W, D) stacks."""
    masks = sample_masks(rng, len(xa), xa.shape[1], xa.shape[2], ratio)
    return np.where(masks[..., None], xa, xb), masks
