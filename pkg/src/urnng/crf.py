"""Chart-structured distribution over binary trees, with its neural scorer.

A sentence of length T gets one real-valued score per span ``(i, j)``; a
tree's unnormalized log-weight is the sum of scores over its spans (singleton
spans included: they appear in every tree, so they shift the partition
function but leave the distribution unchanged).  Everything downstream of the
scores is an O(T^3) chart recursion:

* :func:`inside`, the log partition function,
* :func:`sample_tree`, exact top-down ancestral sampling,
* :func:`tree_entropy`, exact entropy of the tree distribution,
* :func:`viterbi`, the argmax tree.

:class:`InferenceNetwork` produces the scores from a bidirectional LSTM over
the sentence; the chart functions accept scores from any source, which is how
the oracle cross-checks drive them with raw tables.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .treebank import DataError, TreeRepr


@lru_cache(maxsize=None)
def span_order(length: int) -> tuple[tuple[int, int], ...]:
    """Canonical enumeration of all spans (i <= j), 1-based, lexicographic."""
    return tuple((i, j) for i in range(1, length + 1)
                 for j in range(i, length + 1))


@lru_cache(maxsize=None)
def _span_index(length: int) -> dict[tuple[int, int], int]:
    return {span: idx for idx, span in enumerate(span_order(length))}


def span_indicator(trees, length: int) -> np.ndarray:
    """0/1 matrix [n_trees, n_spans] marking each tree's spans."""
    index = _span_index(length)
    out = np.zeros((len(trees), len(index)), dtype=np.float64)
    for row, tree in enumerate(trees):
        if tree.length != length:
            raise ValueError(
                f"tree of length {tree.length} in a length-{length} batch")
        for span in tree.spans:
            out[row, index[span]] = 1.0
    return out


class SpanScores:
    """Span scores for a batch of same-length sentences, shape [B, n_spans]."""

    def __init__(self, length: int, flat: Tensor):
        expected = length * (length + 1) // 2
        if flat.ndim != 2 or flat.shape[1] != expected:
            raise ValueError(
                f"need [batch, {expected}] scores for length {length}, "
                f"got {flat.shape}")
        self.length = length
        self.batch = flat.shape[0]
        self.flat = flat
        self._cells: dict[tuple[int, int], Tensor] = {}

    @classmethod
    def from_table(cls, table, requires_grad: bool = False) -> "SpanScores":
        """Wrap a single [T, T] upper-triangular table (row i-1, col j-1)."""
        table = np.asarray(table, dtype=np.float64)
        length = table.shape[0]
        row = np.array([table[i - 1, j - 1] for (i, j) in span_order(length)])
        return cls(length, Tensor(row[None, :], requires_grad=requires_grad,
                                  name="span_scores"))

    def cell(self, i: int, j: int) -> Tensor:
        """Scores of span (i, j) across the batch, shape [B]."""
        got = self._cells.get((i, j))
        if got is None:
            idx = _span_index(self.length)[(i, j)]
            got = ad.reshape(ad.narrow(self.flat, 1, idx, 1), (self.batch,))
            self._cells[(i, j)] = got
        return got

    def numpy_table(self, b: int = 0) -> np.ndarray:
        """Dense (T+1, T+1) table indexed [i][j] with 1-based spans."""
        t = self.length
        out = np.full((t + 1, t + 1), -np.inf)
        row = self.flat.data[b]
        for idx, (i, j) in enumerate(span_order(t)):
            out[i, j] = row[idx]
        return out


def flatten(scores: SpanScores, temperature: float) -> SpanScores:
    """Divide all scores by ``temperature`` (> 0), spreading the distribution."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return SpanScores(scores.length, ad.scale(scores.flat, 1.0 / temperature))


class Chart:
    """Inside quantities for one batch of score tables."""

    def __init__(self, scores: SpanScores,
                 log_beta: dict[tuple[int, int], Tensor], log_z: Tensor):
        self.scores = scores
        self.length = scores.length
        self.batch = scores.batch
        self.log_beta = log_beta
        self.log_z = log_z
        self._split_lw: dict[tuple[int, int], Tensor] = {}
        self._split_w_np: dict[tuple[int, int], np.ndarray] = {}

    def split_log_weights(self, i: int, j: int) -> Tensor:
        """Log-probabilities over split points k of span (i, j), shape [j-i, B]."""
        got = self._split_lw.get((i, j))
        if got is None:
            lb = self.log_beta
            cand = ad.stack0([ad.add(lb[(i, k)], lb[(k + 1, j)])
                              for k in range(i, j)])
            got = ad.add_row(cand, ad.scale(ad.logsumexp(cand, 0), -1.0))
            self._split_lw[(i, j)] = got
        return got

    def split_weights(self, i: int, j: int) -> np.ndarray:
        got = self._split_w_np.get((i, j))
        if got is None:
            got = np.exp(self.split_log_weights(i, j).data)
            got = got / got.sum(axis=0, keepdims=True)
            self._split_w_np[(i, j)] = got
        return got


def inside(scores: SpanScores) -> Chart:
    """Log-space inside recursion; ``chart.log_z`` has shape [B]."""
    t = scores.length
    lb: dict[tuple[int, int], Tensor] = {}
    for i in range(1, t + 1):
        lb[(i, i)] = scores.cell(i, i)
    for width in range(2, t + 1):
        for i in range(1, t - width + 2):
            j = i + width - 1
            cand = ad.stack0([ad.add(lb[(i, k)], lb[(k + 1, j)])
                              for k in range(i, j)])
            lb[(i, j)] = ad.add(scores.cell(i, j), ad.logsumexp(cand, 0))
    return Chart(scores, lb, lb[(1, t)])


def sample_tree(chart: Chart, rng: np.random.Generator,
                b: int = 0) -> tuple[TreeRepr, float]:
    """Draw one tree exactly from the chart distribution; returns (tree, log q)."""
    t = chart.length
    spans: set[tuple[int, int]] = set()
    agenda: list[tuple[int, int]] = [(1, t)]
    while agenda:
        i, j = agenda.pop()
        spans.add((i, j))
        if i == j:
            continue
        weights = chart.split_weights(i, j)[:, b]
        k = i + int(rng.choice(j - i, p=weights))
        agenda.append((i, k))
        agenda.append((k + 1, j))
    tree = TreeRepr(t, frozenset(spans))
    return tree, tree_log_prob(chart, tree, b)


def tree_log_prob(chart: Chart, tree: TreeRepr, b: int = 0) -> float:
    """Exact log q(tree) under the chart's score table for batch row ``b``."""
    if tree.length != chart.length:
        raise ValueError(
            f"tree length {tree.length} vs chart length {chart.length}")
    index = _span_index(chart.length)
    row = chart.scores.flat.data[b]
    total = sum(row[index[span]] for span in tree.spans)
    return float(total - chart.log_z.data[b])


def tree_log_prob_batch(chart: Chart, trees: list[TreeRepr],
                        rows: np.ndarray) -> Tensor:
    """Differentiable log q for many trees at once, shape [len(trees)].

    ``rows[r]`` names the chart batch row that scores ``trees[r]``; the same
    row may appear many times (e.g. K samples per sentence).
    """
    index = _span_index(chart.length)
    rows = np.asarray(rows, dtype=np.int64)
    if len(trees) != rows.shape[0]:
        raise ValueError(f"{len(trees)} trees vs {rows.shape[0]} rows")
    picks = np.zeros((len(trees), len(index)))
    for r, tree in enumerate(trees):
        if tree.length != chart.length:
            raise ValueError(
                f"tree length {tree.length} vs chart length {chart.length}")
        for span in tree.spans:
            picks[r, index[span]] = 1.0
    scored = ad.sum_axis(ad.mul(ad.take_rows(chart.scores.flat, rows),
                                Tensor(picks)), 1)
    return ad.sub(scored, ad.take_rows(chart.log_z, rows))


def tree_entropy(chart: Chart) -> Tensor:
    """Exact entropy of the tree distribution per batch row, shape [B].

    Bottom-up recursion: the entropy of a span is the split-distribution
    entropy plus the expected entropies of the chosen children.  The result
    stays on the tape, so its gradient w.r.t. the scores is available.
    """
    cells: dict[tuple[int, int], Tensor] = {}
    zero = Tensor(np.zeros(chart.batch))
    t = chart.length
    for i in range(1, t + 1):
        cells[(i, i)] = zero
    for width in range(2, t + 1):
        for i in range(1, t - width + 2):
            j = i + width - 1
            lw = chart.split_log_weights(i, j)
            children = ad.stack0([ad.add(cells[(i, k)], cells[(k + 1, j)])
                                  for k in range(i, j)])
            cells[(i, j)] = ad.sum_axis(
                ad.mul(ad.exp(lw), ad.sub(children, lw)), 0)
    return cells[(1, t)]


def viterbi(scores: SpanScores, b: int = 0) -> tuple[TreeRepr, float]:
    """Highest-scoring tree and its total span score (not normalized).

    Ties are broken toward the largest split point when scores are equal, so
    an all-constant table yields the fully left-branching tree.
    """
    t = scores.length
    table = scores.numpy_table(b)
    best = np.full((t + 2, t + 2), -np.inf)
    back = np.zeros((t + 2, t + 2), dtype=np.int64)
    for i in range(1, t + 1):
        best[i, i] = table[i, i]
    for width in range(2, t + 1):
        for i in range(1, t - width + 2):
            j = i + width - 1
            score = -np.inf
            pick = i
            for k in range(i, j):
                cand = best[i, k] + best[k + 1, j]
                if cand >= score:
                    score = cand
                    pick = k
            best[i, j] = table[i, j] + score
            back[i, j] = pick
    spans: set[tuple[int, int]] = set()
    agenda = [(1, t)]
    while agenda:
        i, j = agenda.pop()
        spans.add((i, j))
        if i < j:
            k = int(back[i, j])
            agenda.append((i, k))
            agenda.append((k + 1, j))
    return TreeRepr(t, frozenset(spans)), float(best[1, t])


class InferenceNetwork:
    """BiLSTM + MLP span scorer defining the variational tree distribution.

    The word embedding table is shared with the generative model and is not
    listed among this network's own parameters; pass it in, or omit it to get
    a standalone table (useful in tests).
    """

    def __init__(self, vocab_size: int, word_dim: int, hidden_dim: int = 256,
                 mlp_hidden: int | None = None, max_len: int = 150,
                 dropout: float = 0.5,
                 rng: np.random.Generator | None = None,
                 embedding: Tensor | None = None,
                 init_scale: float = nn.INIT_SCALE):
        rng = rng if rng is not None else np.random.default_rng(0)
        if mlp_hidden is None:
            mlp_hidden = 2 * hidden_dim
        self.word_dim = word_dim
        self.hidden_dim = hidden_dim
        self.max_len = max_len
        self.dropout = dropout
        if embedding is None:
            embedding = nn.make_param(rng, "emb", (vocab_size, word_dim),
                                      init_scale)
        self.embedding = embedding
        p = {}
        p["inf.boundary"] = nn.make_param(rng, "inf.boundary", (2, word_dim),
                                          init_scale)
        p["inf.position"] = nn.make_param(rng, "inf.position",
                                          (max_len + 2, word_dim), init_scale)
        p["inf.fwd_w"] = nn.make_param(
            rng, "inf.fwd_w", (word_dim + hidden_dim, 4 * hidden_dim),
            init_scale)
        p["inf.fwd_b"] = nn.make_param(rng, "inf.fwd_b", (4 * hidden_dim,),
                                       init_scale)
        p["inf.bwd_w"] = nn.make_param(
            rng, "inf.bwd_w", (word_dim + hidden_dim, 4 * hidden_dim),
            init_scale)
        p["inf.bwd_b"] = nn.make_param(rng, "inf.bwd_b", (4 * hidden_dim,),
                                       init_scale)
        p["inf.mlp_w1"] = nn.make_param(rng, "inf.mlp_w1",
                                        (2 * hidden_dim, mlp_hidden),
                                        init_scale)
        p["inf.mlp_b1"] = nn.make_param(rng, "inf.mlp_b1", (mlp_hidden,),
                                        init_scale)
        p["inf.ln_gain"] = Tensor(np.ones(mlp_hidden), requires_grad=True,
                                  name="inf.ln_gain")
        p["inf.ln_bias"] = Tensor(np.zeros(mlp_hidden), requires_grad=True,
                                  name="inf.ln_bias")
        p["inf.mlp_w2"] = nn.make_param(rng, "inf.mlp_w2", (mlp_hidden, 1),
                                        init_scale)
        p["inf.mlp_b2"] = nn.make_param(rng, "inf.mlp_b2", (1,), init_scale)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        """Inference-network-owned parameters (the shared embedding excluded)."""
        return dict(self.params)

    def span_scores(self, ids: np.ndarray,
                    rng: np.random.Generator | None = None) -> SpanScores:
        """Score all spans of a batch of same-length sentences.

        ``ids`` is an integer array [B, T].  Pass ``rng`` to enable dropout
        (training mode); omit it for deterministic evaluation.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError(f"ids must be [batch, length], got {ids.shape}")
        batch, t = ids.shape
        if t > self.max_len:
            raise DataError(
                f"sentence length {t} exceeds position table capacity "
                f"{self.max_len}")
        p = self.params
        hidden = self.hidden_dim

        # Inputs at padded positions 0..T+1: boundary, words, boundary, each
        # with its learned position embedding added.
        inputs: list[Tensor] = []
        for pos in range(t + 2):
            if pos == 0:
                x = ad.take_rows(p["inf.boundary"], np.zeros(batch, np.int64))
            elif pos == t + 1:
                x = ad.take_rows(p["inf.boundary"], np.ones(batch, np.int64))
            else:
                x = ad.take_rows(self.embedding, ids[:, pos - 1])
            pos_rows = ad.take_rows(p["inf.position"],
                                    np.full(batch, pos, np.int64))
            inputs.append(ad.add(x, pos_rows))

        zero = nn.zeros((batch, hidden))
        fwd: list[Tensor] = []
        state = (zero, zero)
        for pos in range(t + 2):
            state = nn.lstm_cell(inputs[pos], state, p["inf.fwd_w"],
                                 p["inf.fwd_b"])
            fwd.append(state[0])
        bwd_rev: list[Tensor] = []
        state = (zero, zero)
        for pos in range(t + 1, -1, -1):
            state = nn.lstm_cell(inputs[pos], state, p["inf.bwd_w"],
                                 p["inf.bwd_b"])
            bwd_rev.append(state[0])
        bwd = bwd_rev[::-1]

        feats = []
        for (i, j) in span_order(t):
            fdiff = ad.sub(fwd[j + 1], fwd[i])
            bdiff = ad.sub(bwd[i - 1], bwd[j])
            feats.append(ad.concat([fdiff, bdiff], axis=1))
        sheet = ad.concat(feats, axis=0)  # [P*B, 2H], span-major
        h = ad.relu(nn.linear(sheet, p["inf.mlp_w1"], p["inf.mlp_b1"]))
        h = ad.layer_norm(h, p["inf.ln_gain"], p["inf.ln_bias"])
        h = ad.dropout(h, self.dropout, rng)
        out = nn.linear(h, p["inf.mlp_w2"], p["inf.mlp_b2"])  # [P*B, 1]
        n_spans = len(span_order(t))
        flat = ad.transpose(ad.reshape(out, (n_spans, batch)))
        return SpanScores(t, flat)
