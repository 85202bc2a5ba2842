"""Base-session joint training, prompt-only incremental adaptation, evaluation, checkpoints."""

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__, container, datagen, encoders as E
from . import metrics, numerics as nx
from .errors import ConfigError, ContractError, FreezeViolation, ParseError, ProtocolError
from .losses import (NEGATIVE_RULES, LossWeights, base_loss, context_prompt_loss,
                     imagined_contrastive_loss, margin_ce_loss, sample_pairs, softmax_ce)
from .numerics import Tensor
from .relation import FusionHead, RelationGraph, check_mode, mode_logits, text_adjacency

MAGIC = b"LRTM"

USES_TEXT = {"full", "zero-shot", "fusion-only", "graph-only", "static-tau", "proto-add"}
USES_GRAPH = {"full", "graph-only", "static-tau"}
USES_TAU = {"full", "fusion-only"}  # modes in which tau is learned
ADAPTS_PROMPTS = USES_TEXT - {"zero-shot"}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    decay_at: Tuple[float, float] = (0.4, 0.7)
    decay: float = 0.1
    lambda_m: float = 0.1
    lambda_im: float = 0.05
    margin: float = 0.4
    margin_scale: float = 1.0
    logit_scale: float = 32.0
    grad_clip: float = 1.0  # global gradient-norm cap in the base session; 0 disables
    prefix_len: int = 2
    suffix_len: int = 2
    n_templates: int = 1
    prompt_steps: int = 50
    prompt_lr: float = 0.01
    negative_rule: str = "pair"
    mode: str = "full"
    d_v: int = 16
    align_steps: int = 300
    align_classes: int = 64
    align_per_class: int = 16
    align_batch: int = 64
    align_lr: float = 0.2
    align_scale: float = 32.0
    seed: int = 0

    @property
    def weights(self):
        return LossWeights(self.lambda_m, self.lambda_im, self.margin, self.margin_scale)

    def validate(self):
        for name in ("batch_size", "n_templates", "d_v", "align_classes", "align_per_class", "align_batch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "prompt_steps", "prefix_len", "suffix_len", "align_steps", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("lr", "prompt_lr", "logit_scale", "decay", "align_lr", "align_scale"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be a positive float")
        if len(self.decay_at) != 2 or not all(0 < d < 1 for d in self.decay_at):
            raise ConfigError("decay points must be two fractions inside (0, 1)")
        if self.negative_rule not in NEGATIVE_RULES:
            raise ConfigError(f"negative_rule must be one of {NEGATIVE_RULES}")
        check_mode(self.mode)
        self.weights.validate()
        return self

    def lr_at(self, epoch):
        frac = epoch / max(self.epochs, 1)
        return self.lr * self.decay ** sum(frac >= d for d in self.decay_at)

    def to_json(self):
        d = asdict(self)
        d["decay_at"] = list(self.decay_at)
        return d

    @classmethod
    def from_json(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        if "decay_at" in d:
            d["decay_at"] = tuple(d["decay_at"])
        return cls(**d)


@dataclass
class ModelState:
    visual: E.VisualEncoder
    text: E.TextEncoder
    bank: E.PromptBank
    protos: E.PrototypeStore
    head: FusionHead
    names: Dict[int, Tuple[int, ...]]
    mode: str
    rng: np.random.Generator
    graph: Optional[RelationGraph] = None
    session: int = 0
    session_classes: List[List[int]] = field(default_factory=list)
    history: List[float] = field(default_factory=list)  # accuracy after each finished session

    @property
    def seen(self):
        return [c for blk in self.session_classes for c in blk]

    def text_matrix(self):
        return None if self.protos.text is None else Tensor(self.protos.text)

    def refresh_graph(self):
        if self.mode in USES_GRAPH:
            self.graph = text_adjacency(self.protos.text)

    def frozen_tensors(self):
        """Every tensor that exists in the state, keyed by a stable name."""
        out = {"token_table": self.text.token_table, "projection": self.text.projection}
        out.update(self.visual.parameters())
        out.update(self.head.parameters())
        out.update(self.bank.parameters())
        for k, blk in enumerate(self.protos.blocks):
            out[f"V/{k + 1}"] = blk
        return out


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------


class FreezeGuard:
    """Snapshot of every non-trainable tensor; ``check`` raises on any change or stray gradient."""

    def __init__(self, tensors, trainable):
        ids = {id(t) for t in trainable}
        self.frozen = {k: (t, t.data.copy()) for k, t in tensors.items() if id(t) not in ids}

    def check(self):
        for name, (t, snap) in self.frozen.items():
            if t.grad is not None and np.any(t.grad):
                raise FreezeViolation(f"frozen tensor {name} received a gradient")
            if not np.array_equal(t.data, snap):
                raise FreezeViolation(f"frozen tensor {name} changed")


def _set_trainable(state, trainable):
    ids = {id(t) for t in trainable}
    for t in state.frozen_tensors().values():
        t.requires_grad = id(t) in ids


def _step(params, lr, clip=0.0):
    if clip > 0:
        norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
        if norm > clip:
            lr = lr * clip / norm
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad
            p.grad = None


# ---------------------------------------------------------------------------
# base session
# ---------------------------------------------------------------------------


def init_state(dataset, config: TrainConfig) -> ModelState:
    config.validate()
    man = dataset.manifest
    if not man.sessions or not man.sessions[0]:
        raise ConfigError("dataset has an empty base session")
    rng = np.random.default_rng(config.seed)
    H, W, D = man.dims
    d_t = config.d_v
    visual = E.VisualEncoder.init(rng, D, config.d_v)
    text = E.TextEncoder.init(rng, dataset.token_table, d_t, config.n_templates)
    align_encoder(visual, text, dataset, config, rng)
    bank = E.PromptBank(config.prefix_len, config.suffix_len, text.d_tok)
    base = list(man.sessions[0])
    for c in base:
        bank.register(c, rng)
    protos = E.PrototypeStore(config.d_v)
    protos.add_block(base, [E.class_prototype(dataset.train[c], visual) for c in base], trainable=True)
    names = {c: tuple(tok) for c, tok in man.classes}
    state = ModelState(visual, text, bank, protos, FusionHead.init(config.d_v), names, config.mode, rng)
    state.session_classes = [base]
    return state


def align_encoder(visual, text, dataset, config, rng):
    """Contrastive image/name alignment of ``visual`` against the frozen text tower.

    Stand-in for starting from a pretrained, text-aligned backbone: trains on a
    pool of extra world classes (never part of any session) with plain name prompts.
    """
    if config.align_steps == 0:
        return
    X, y, names = datagen.world_pool(dataset, config.align_classes, config.align_per_class, config.seed)
    seqs = Tensor(np.stack([text.embed(t) for t in names]))
    T = Tensor(E.encode_text_batch(seqs, text).data)
    params = [visual.W_enc, visual.b_enc]
    guard = FreezeGuard({"token_table": text.token_table, "projection": text.projection}, params)
    for p in params:
        p.requires_grad = True
    for _ in range(config.align_steps):
        bi = rng.choice(len(y), config.align_batch, replace=False)
        with nx.Tape() as tape:
            f = E.encode_batch(X[bi], visual)
            loss = softmax_ce(nx.mul(config.align_scale, nx.cosine_matrix(f, T)), y[bi])
        tape.backward(loss)
        _step(params, config.align_lr)
        guard.check()


def base_trainables(state):
    mode = state.mode
    out = [state.visual.W_enc, state.visual.b_enc]
    if mode != "zero-shot":
        out.append(state.protos.blocks[0])
    if mode in USES_TEXT:
        out += list(state.bank.parameters(state.session_classes[0]).values())
    if mode in USES_GRAPH:
        out.append(state.head.W_v)
    if mode in USES_TAU:
        out.append(state.head.tau)
    return out


def _text_protos(state, classes):
    return E.text_prototypes(classes, state.bank, state.names, state.text)


def base_batch_loss(state, xb, yb, pos, config, T, graph):
    """Composite base-session loss of one batch (must run inside a Tape)."""
    mode = state.mode
    w = config.weights
    f = E.encode_batch(xb, state.visual)
    V = state.protos.blocks[0]
    logits, cosines = mode_logits(mode, f, V, T, graph, state.head)
    ce = softmax_ce(nx.mul(config.logit_scale, logits), pos)
    if mode == "visual-only":
        return ce
    mce = margin_ce_loss(cosines, pos, w.scale, w.margin) if w.lambda_m else 0.0
    im = 0.0
    if w.lambda_im:
        idx = sample_pairs(yb, state.rng)
        mixed, _ = E.cutmix_batch(xb[idx[:, 0]], xb[idx[:, 1]], state.rng)
        cls_pairs = yb[idx]
        mf = E.encode_batch(mixed, state.visual)
        mt = E.encode_text_batch(E.assemble_batch(cls_pairs, state.bank, state.names, state.text), state.text)
        im = imagined_contrastive_loss(mf, mt, cls_pairs, config.negative_rule, config.logit_scale)
    return base_loss(ce, mce, im, w)


def train_base(dataset, config: TrainConfig, state: Optional[ModelState] = None,
               on_epoch=None) -> ModelState:
    """Joint base-session training; returns the state with session counter 1.

    ``on_epoch(epoch, mean_loss, state)`` is called after every epoch when given.
    """
    state = init_state(dataset, config) if state is None else state
    base = state.session_classes[0]
    X, y = dataset.arrays(base)
    pos_of = np.full(max(base) + 1, -1)
    pos_of[base] = np.arange(len(base))
    trainable = base_trainables(state)
    _set_trainable(state, trainable)
    guard = FreezeGuard(state.frozen_tensors(), trainable)
    n = len(y)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        # text prototypes and adjacency are refreshed once per epoch and held constant within it
        T = Tensor(_text_protos(state, base).data) if state.mode in USES_TEXT else None
        graph = text_adjacency(T) if state.mode in USES_GRAPH else None
        order = state.rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            bi = order[lo:lo + config.batch_size]
            xb, yb = X[bi], y[bi]
            with nx.Tape() as tape:
                loss = base_batch_loss(state, xb, yb, pos_of[yb], config, T, graph)
            if not np.isfinite(loss.data):
                raise ContractError(f"non-finite base loss at epoch {epoch}")
            tape.backward(loss)
            _step(trainable, lr, config.grad_clip)
            guard.check()
            total += loss.item() * len(bi)
        if on_epoch is not None:
            on_epoch(epoch, total / n, state)
    _set_trainable(state, [])
    state.protos.blocks[0].requires_grad = False
    if state.mode in USES_TEXT:
        state.protos.text = _text_protos(state, base).data
    state.refresh_graph()
    state.session = 1
    return state


# ---------------------------------------------------------------------------
# incremental sessions
# ---------------------------------------------------------------------------


def train_incremental(state: ModelState, dataset, session_index, config: TrainConfig) -> ModelState:
    """Adapt to session ``session_index`` (1-based, >= 2) in place and return the state."""
    man = dataset.manifest
    if state.session < 1:
        raise ProtocolError("incremental training needs a trained base session")
    if session_index != state.session + 1:
        raise ProtocolError(f"expected session {state.session + 1}, got {session_index}")
    new = list(man.sessions[session_index - 1])
    overlap = set(new) & set(state.seen)
    if overlap:
        raise ProtocolError(f"classes {sorted(overlap)} were already learned")
    for c in new:
        if len(dataset.train[c]) != man.n_shot:
            raise ProtocolError(f"incremental class {c} must have exactly {man.n_shot} samples")

    shots = [dataset.train[c] for c in new]
    state.protos.add_block(new, [E.class_prototype(s, state.visual) for s in shots], trainable=False)
    for c in new:
        state.bank.register(c, state.rng, trainable=False)

    if state.mode in USES_TEXT:
        prompts = list(state.bank.parameters(new).values())
        _set_trainable(state, prompts)
        guard = FreezeGuard(state.frozen_tensors(), prompts)
        steps = config.prompt_steps if state.mode in ADAPTS_PROMPTS else 0
        if steps:
            X = np.concatenate(shots)
            feats = E.encode_batch(X, state.visual).data
            labels = len(state.seen) + np.repeat(np.arange(len(new)), [len(s) for s in shots])
            old_T = Tensor(state.protos.text)
            tau = state.head.tau.data if state.mode in USES_TAU else 1.0
            for _ in range(steps):
                with nx.Tape() as tape:
                    T_all = nx.concat([old_T, _text_protos(state, new)], axis=0)
                    loss = context_prompt_loss(feats, labels, T_all, tau, config.logit_scale)
                tape.backward(loss)
                _step(prompts, config.prompt_lr)
                guard.check()
        _set_trainable(state, [])
        state.protos.text = np.concatenate([state.protos.text, _text_protos(state, new).data])
    state.session_classes.append(new)
    state.refresh_graph()
    state.session = session_index
    return state


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def class_logits(state: ModelState, images):
    """Per-class logits of ``images`` over every class seen so far."""
    f = E.encode_batch(images, state.visual)
    V = Tensor(state.protos.visual_array())
    logits, _ = mode_logits(state.mode, f, V, state.text_matrix(), state.graph, state.head)
    return logits.data


def predict(state, images):
    seen = np.asarray(state.seen)
    return seen[np.argmax(class_logits(state, images), axis=1)]


def evaluate(state: ModelState, dataset, classes=None):
    """``(predictions, labels)`` over the test split of ``classes`` (default: all seen)."""
    classes = state.seen if classes is None else classes
    X, y = dataset.arrays(classes, split="test")
    return predict(state, X), y


def _zero_shot_acc(state, dataset):
    X, y = dataset.arrays(state.seen, split="test")
    f = E.encode_batch(X, state.visual)
    pred = np.asarray(state.seen)[np.argmax(nx.cosine_matrix(f, state.text_matrix()).data, axis=1)]
    return metrics.session_accuracy(pred, y)


def session_report(state, dataset, session_acc, n_seen):
    man = dataset.manifest
    pred, y = evaluate(state, dataset)
    base = set(man.sessions[0])
    is_base = np.isin(y, list(base))
    base_acc = metrics.session_accuracy(pred[is_base], y[is_base])
    inc_acc = None
    if (~is_base).any():
        inc_acc = metrics.session_accuracy(pred[~is_base], y[~is_base])
    conf = metrics.confusion_matrix(pred, y, len(man.classes))
    text = None
    if state.mode in USES_TEXT:
        text = {"tau": float(state.head.tau.data), "text_only_accuracy": _zero_shot_acc(state, dataset)}
    return metrics.build_report(state.mode, session_acc, n_seen, base_acc, inc_acc, conf, text)


def run_protocol(dataset, config: TrainConfig, keep_states=False, state=None):
    """Train all sessions, evaluating on every seen class after each one.

    Returns ``(states, report)``; ``states`` holds per-session snapshots when
    ``keep_states`` is set, otherwise just the final state.  A ``state`` that has
    already completed some sessions is resumed.
    """
    config.validate()
    man = dataset.manifest
    states = []
    if state is None:
        state = train_base(dataset, config)
    if len(state.history) < state.session:
        state.history.append(metrics.session_accuracy(*evaluate(state, dataset)))
    if keep_states:
        states.append(copy.deepcopy(state))
    for s in range(state.session + 1, len(man.sessions) + 1):
        train_incremental(state, dataset, s, config)
        state.history.append(metrics.session_accuracy(*evaluate(state, dataset)))
        if keep_states:
            states.append(copy.deepcopy(state))
    if not keep_states:
        states.append(state)
    n_seen = [sum(len(b) for b in man.sessions[:s + 1]) for s in range(state.session)]
    return states, session_report(state, dataset, state.history, n_seen)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _rng_state(rng):
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"], "state": {k: str(v) for k, v in st["state"].items()},
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def _restore_rng(d):
    rng = np.random.default_rng()
    if d["bit_generator"] != type(rng.bit_generator).__name__:
        raise ParseError(f"unsupported bit generator {d['bit_generator']}", 0)
    rng.bit_generator.state = {"bit_generator": d["bit_generator"],
                               "state": {k: int(v) for k, v in d["state"].items()},
                               "has_uint32": d["has_uint32"], "uinteger": d["uinteger"]}
    return rng


def save_state(state: ModelState, path):
    arrays = {k: t.data for k, t in state.frozen_tensors().items()}
    for k, tpl in enumerate(state.text.templates):
        arrays[f"template/{k}"] = tpl
    if state.protos.text is not None:
        arrays["T"] = state.protos.text
    meta = {
        "version": __version__,
        "mode": state.mode,
        "session": state.session,
        "session_classes": state.session_classes,
        "names": {str(c): list(t) for c, t in sorted(state.names.items())},
        "prompt_lengths": [state.bank.prefix_len, state.bank.suffix_len],
        "prompt_classes": state.bank.classes(),
        "n_templates": len(state.text.templates),
        "rng": _rng_state(state.rng),
        "history": state.history,
    }
    return container.write(path, MAGIC, meta, arrays)


def load_state(path) -> ModelState:
    meta, arrays = container.read(path, MAGIC)
    try:
        return _build_state(meta, arrays)
    except KeyError as exc:
        raise ParseError(f"model file lacks field {exc}", 0) from None


def _build_state(meta, a):
    visual = E.VisualEncoder(Tensor(a["W_enc"], name="W_enc"), Tensor(a["b_enc"], name="b_enc"), False)
    templates = [a[f"template/{k}"] for k in range(meta["n_templates"])]
    text = E.TextEncoder(Tensor(a["token_table"], name="token_table"),
                         Tensor(a["projection"], name="projection"), templates)
    d_v = visual.d_v
    if a["b_enc"].shape != (d_v,) or a["W_v"].shape != (d_v, d_v):
        raise ConfigError("encoder and graph weight dimensions disagree")
    if text.d_t != d_v:
        raise ConfigError(f"text dim {text.d_t} does not match visual dim {d_v}")
    lp, ls = meta["prompt_lengths"]
    bank = E.PromptBank(lp, ls, text.d_tok)
    for c in meta["prompt_classes"]:
        bank.prefix[c] = Tensor(a[f"prefix/{c}"], name=f"prefix/{c}")
        bank.suffix[c] = Tensor(a[f"suffix/{c}"], name=f"suffix/{c}")
        if bank.prefix[c].shape != (lp, text.d_tok) or bank.suffix[c].shape != (ls, text.d_tok):
            raise ConfigError(f"prompt of class {c} has the wrong shape")
    session_classes = [list(map(int, s)) for s in meta["session_classes"]]
    protos = E.PrototypeStore(d_v)
    for k, cls in enumerate(session_classes):
        protos.add_block(cls, a[f"V/{k + 1}"], trainable=False)
    if "T" in a:
        protos.text = a["T"]
        if protos.text.shape != (len(protos.classes), d_v):
            raise ConfigError("text prototype table does not match the class list")
    head = FusionHead(Tensor(a["W_v"], name="W_v"), Tensor(a["tau"], name="tau"))
    names = {int(c): tuple(t) for c, t in meta["names"].items()}
    state = ModelState(visual, text, bank, protos, head, names, check_mode(meta["mode"]),
                       _restore_rng(meta["rng"]), session=int(meta["session"]),
                       session_classes=session_classes,
                       history=[float(h) for h in meta["history"]])
    state.refresh_graph()
    return state


def check_compatible(state: ModelState, dataset):
    H, W, D = dataset.manifest.dims
    if state.visual.d_raw != D:
        raise ConfigError(f"model expects D_raw={state.visual.d_raw}, dataset has {D}")
    if state.text.token_table.shape != dataset.token_table.shape:
        raise ConfigError("model token table does not match the dataset vocabulary")
    if max(state.seen) >= len(dataset.manifest.classes):
        raise ConfigError("model knows classes the dataset does not have")
