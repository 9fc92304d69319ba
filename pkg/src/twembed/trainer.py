"""Masked-node + graph-identity training of the walk encoder.

Two linear heads sit on top of the encoder. The temporal-dynamics head maps
each masked position's hidden state to a distribution over node tokens; the
graph head maps each sequence's CLS state to a distribution over training
graphs. After training, column ``i`` of the graph head is the embedding of
graph ``i``.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, EncoderState, Vocabulary, encode_backward, encode_forward, log_softmax
from .errors import ConfigError, CorpusMismatchError, LookupFailure, TrainingDivergedError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 5.0
    batch_size: int = 32
    epochs: int = 50
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    mask_rate: float = 0.15
    mask_probs: tuple = (0.8, 0.1, 0.1)  # replace with MASK, random node, keep
    td_normalizer: str = "walk"  # or "position"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if len(self.mask_probs) != 3 or min(self.mask_probs) < 0 or abs(sum(self.mask_probs) - 1.0) > 1e-9:
            raise ConfigError("mask_probs must be three non-negative numbers summing to 1")
        if not 0.0 < self.mask_rate <= 1.0:
            raise ConfigError("mask_rate must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("batch_size must be positive, epochs non-negative, lr positive")
        if self.td_normalizer not in ("walk", "position"):
            raise ConfigError("td_normalizer must be 'walk' or 'position'")


@dataclass
class MaskedBatch:
    tokens: np.ndarray  # (B, max_seq) CLS at 0, PAD after the walk
    key_mask: np.ndarray  # (B, max_seq) True for CLS and node positions
    mask_rows: np.ndarray  # (M,) sequence index of each masked position
    mask_cols: np.ndarray  # (M,) position index
    targets: np.ndarray  # (M,) original node id
    graph_targets: np.ndarray  # (B,)
    original: np.ndarray  # (B, max_seq) tokens before masking

    @property
    def size(self) -> int:
        return len(self.tokens)


@dataclass
class Heads:
    W_TD: np.ndarray  # (d, |V|)
    W_GS: np.ndarray  # (d, n_graphs)
    graph_ids: list

    def __post_init__(self):
        if self.W_GS.shape[1] != len(self.graph_ids):
            raise CorpusMismatchError("graph head width must equal the number of training graphs")

    @classmethod
    def initialize(cls, d, vocab_size, graph_ids, rng):
        return cls(rng.normal(0.0, 0.02, size=(d, vocab_size)),
                   rng.normal(0.0, 0.02, size=(d, len(graph_ids))),
                   list(graph_ids))


@dataclass
class TrainResult:
    state: EncoderState
    heads: Heads
    trace: list = field(default_factory=list)  # dicts: epoch, L_TD, L_GS, L_total


def n_masked(length: int, rate: float) -> int:
    # the small offset keeps 0.15 * 20 = 3.0000000000000004 from rounding up to 4
    return max(1, math.ceil(rate * length - 1e-9))


def make_masked_batch(walks, vocab: Vocabulary, graph_index: dict, cfg: TrainConfig, rng,
                      max_seq: int) -> MaskedBatch:
    B = len(walks)
    tokens = np.full((B, max_seq), vocab.pad, dtype=np.int64)
    tokens[:, 0] = vocab.cls
    rows, cols, targets, gtargets = [], [], [], []
    p_mask, p_rand, _ = cfg.mask_probs
    for b, w in enumerate(walks):
        nodes = w.nodes[: max_seq - 1]
        L = len(nodes)
        if L < 2:
            raise ValidationError(f"walk of length {L} cannot be masked (need >= 2)")
        if max(nodes) >= vocab.n_nodes:
            raise CorpusMismatchError(f"node {max(nodes)} outside vocabulary of {vocab.n_nodes} nodes")
        tokens[b, 1:L + 1] = nodes
        try:
            gtargets.append(graph_index[w.graph_id])
        except KeyError:
            raise CorpusMismatchError(f"walk from unknown graph {w.graph_id!r}") from None
        picks = np.sort(rng.choice(L, size=n_masked(L, cfg.mask_rate), replace=False)) + 1
        for j in picks:
            rows.append(b)
            cols.append(int(j))
            targets.append(int(tokens[b, j]))
    original = tokens.copy()
    rows = np.array(rows, dtype=np.int64)
    cols = np.array(cols, dtype=np.int64)
    u = rng.random(len(rows))
    replace = u < p_mask
    randomize = (u >= p_mask) & (u < p_mask + p_rand)
    tokens[rows[replace], cols[replace]] = vocab.mask
    tokens[rows[randomize], cols[randomize]] = rng.integers(0, vocab.n_nodes, size=int(randomize.sum()))
    return MaskedBatch(tokens, original != vocab.pad, rows, cols, np.array(targets, dtype=np.int64),
                       np.array(gtargets, dtype=np.int64), original)


def _cross_entropy(logits, targets):
    """Per-row ``-log softmax(logits)[target]`` and ``d/dlogits`` of their sum."""
    lsm = log_softmax(logits)
    rows = np.arange(len(targets))
    losses = -lsm[rows, targets]
    dlogits = np.exp(lsm)
    dlogits[rows, targets] -= 1.0
    return losses, dlogits


def temporal_dynamics_loss(hidden, batch: MaskedBatch, W_TD, normalizer="walk", return_grads=False):
    """Masked-node cross-entropy, summed within each walk and averaged over walks.

    With ``normalizer="position"`` the sum is divided by the number of masked
    positions instead. ``return_grads`` adds ``(d_hidden, d_W_TD)``.
    """
    E = hidden[batch.mask_rows, batch.mask_cols]
    losses, dlogits = _cross_entropy(E @ W_TD, batch.targets)
    denom = batch.size if normalizer == "walk" else max(len(losses), 1)
    loss = float(losses.sum() / denom)
    if not return_grads:
        return loss
    dlogits /= denom
    dW = E.T @ dlogits
    dH = np.zeros_like(hidden)
    np.add.at(dH, (batch.mask_rows, batch.mask_cols), dlogits @ W_TD.T)
    return loss, dH, dW


def graph_level_loss(cls_embeddings, graph_targets, W_GS, return_grads=False):
    """Mean cross-entropy of predicting each sequence's source graph from its CLS state."""
    graph_targets = np.asarray(graph_targets)
    M = W_GS.shape[1]
    if graph_targets.size and (graph_targets.min() < 0 or graph_targets.max() >= M):
        raise CorpusMismatchError(f"graph index outside 0..{M - 1}")
    if M == 1:
        warnings.warn("graph head has a single column; graph-level loss is identically 0", stacklevel=2)
    n = len(graph_targets)
    losses, dlogits = _cross_entropy(cls_embeddings @ W_GS, graph_targets)
    loss = float(losses.sum() / n)
    if not return_grads:
        return loss
    dlogits /= n
    return loss, dlogits @ W_GS.T, cls_embeddings.T @ dlogits


def loss_and_grads(state: EncoderState, heads: Heads, batch: MaskedBatch, cfg: TrainConfig,
                   rng=None, need_grads=True):
    """Joint objective ``lambda1 * L_TD + lambda2 * L_GS`` and its gradients.

    Returns ``(L_TD, L_GS, L_total, grads)``; ``grads`` is keyed like the
    encoder parameters plus ``W_TD`` and ``W_GS`` (``None`` if not requested).
    """
    H, cache = encode_forward(batch.tokens, state, batch.key_mask, rng)
    ltd, dH_td, dW_td = temporal_dynamics_loss(H, batch, heads.W_TD, cfg.td_normalizer, return_grads=True)
    lgs, dcls, dW_gs = graph_level_loss(H[:, 0], batch.graph_targets, heads.W_GS, return_grads=True)
    total = cfg.lambda1 * ltd + cfg.lambda2 * lgs
    if not need_grads:
        return ltd, lgs, total, None
    dH = cfg.lambda1 * dH_td
    dH[:, 0] += cfg.lambda2 * dcls
    grads = encode_backward(dH, state, cache)
    grads["W_TD"] = cfg.lambda1 * dW_td
    grads["W_GS"] = cfg.lambda2 * dW_gs
    return ltd, lgs, total, grads


class Adam:
    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(self.params):
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batches(n, size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _diagnostics(state, heads, epoch, batch_no, walks_idx, walks):
    norms = {k: float(np.linalg.norm(v)) for k, v in sorted(state.params.items())}
    norms["W_TD"] = float(np.linalg.norm(heads.W_TD))
    norms["W_GS"] = float(np.linalg.norm(heads.W_GS))
    return {
        "epoch": epoch,
        "batch": batch_no,
        "batch_graphs": sorted({walks[i].graph_id for i in walks_idx}),
        "parameter_norms": norms,
    }


def train(walks, vocab: Vocabulary, enc_cfg: EncoderConfig, cfg: TrainConfig = TrainConfig(),
          graph_ids=None, callback=None) -> TrainResult:
    """Fit encoder and heads on ``walks``; one trace row per epoch.

    Row 0 is the loss of the untrained model over the full corpus. Later rows
    are sequence-weighted means over that epoch's batches. ``graph_ids`` fixes
    the column order of the graph head (default: sorted ids seen in walks).
    """
    if not walks:
        raise ValidationError("no walks to train on")
    if enc_cfg.vocab_size != vocab.size:
        raise ConfigError(f"encoder vocab_size {enc_cfg.vocab_size} != vocabulary size {vocab.size}")
    if graph_ids is None:
        graph_ids = sorted({w.graph_id for w in walks})
    graph_index = {g: i for i, g in enumerate(graph_ids)}
    if len(graph_index) != len(graph_ids):
        raise ValidationError("duplicate graph ids")
    init_ss, shuffle_ss, mask_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng = np.random.default_rng(init_ss)
    state = EncoderState.initialize(enc_cfg, seed=int(init_rng.integers(2**63)))
    heads = Heads.initialize(enc_cfg.d, vocab.size, graph_ids, init_rng)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    mask_rng = np.random.default_rng(mask_ss)
    drop_rng = np.random.default_rng(drop_ss) if enc_cfg.dropout > 0 else None

    params = dict(state.params)
    params["W_TD"] = heads.W_TD
    params["W_GS"] = heads.W_GS
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
    result = TrainResult(state, heads)

    def run_epoch(epoch, update):
        sums = np.zeros(2)
        seen = 0
        order_rng = shuffle_rng if update else None
        for b, idx in enumerate(_batches(len(walks), cfg.batch_size, order_rng)):
            chunk = [walks[i] for i in idx]
            batch = make_masked_batch(chunk, vocab, graph_index, cfg, mask_rng, enc_cfg.max_seq)
            ltd, lgs, total, grads = loss_and_grads(state, heads, batch, cfg,
                                                    rng=drop_rng if update else None, need_grads=update)
            if not np.isfinite(total):
                diag = _diagnostics(state, heads, epoch, b, idx, walks)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}", diag)
            if update:
                opt.step(grads)
            sums += batch.size * np.array([ltd, lgs])
            seen += batch.size
        ltd, lgs = sums / seen
        row = {"epoch": epoch, "L_TD": float(ltd), "L_GS": float(lgs),
               "L_total": float(cfg.lambda1 * ltd + cfg.lambda2 * lgs)}
        result.trace.append(row)
        log.info("epoch %d  L_TD=%.4f  L_GS=%.4f  L_total=%.4f", epoch, row["L_TD"], row["L_GS"], row["L_total"])
        if callback is not None:
            callback(row)

    run_epoch(0, update=False)
    for epoch in range(1, cfg.epochs + 1):
        run_epoch(epoch, update=True)
    return result


def extract_embeddings(heads: Heads, graph_ids=None) -> np.ndarray:
    """Rows are graph-head columns, in ``graph_ids`` order (default: training order)."""
    if graph_ids is None:
        return heads.W_GS.T.copy()
    index = {g: i for i, g in enumerate(heads.graph_ids)}
    cols = []
    for g in graph_ids:
        if g not in index:
            raise LookupFailure(f"no embedding for graph {g!r}; embeddings exist only for training graphs")
        cols.append(index[g])
    return heads.W_GS[:, cols].T.copy()


def write_embeddings(path, graph_ids, matrix) -> None:
    d = matrix.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["graph_id"] + [f"e{j}" for j in range(d)]) + "\n")
        for gid, row in zip(graph_ids, matrix):
            fh.write(",".join([gid] + [repr(float(x)) for x in row]) + "\n")


def read_embeddings(path) -> tuple[list, np.ndarray]:
    ids, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "graph_id":
            raise ValidationError(f"{path}: expected header 'graph_id,e0,...'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} columns")
            ids.append(row[0])
            rows.append([float(x) for x in row[1:]])
    return ids, np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)


def write_loss_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,L_TD,L_GS,L_total\n")
        for r in trace:
            fh.write(f"{r['epoch']},{r['L_TD']!r},{r['L_GS']!r},{r['L_total']!r}\n")


def read_loss_trace(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"epoch": int(r["epoch"]), "L_TD": float(r["L_TD"]), "L_GS": float(r["L_GS"]),
                 "L_total": float(r["L_total"])} for r in csv.DictReader(fh)]
