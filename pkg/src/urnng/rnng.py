"""Stack-based generative model over (sentence, binary tree) pairs.

The model emits a sentence and its parse through shift/reduce actions over a
stack.  Each stack element is a pair (h, g): h is the hidden state of a
two-layer LSTM reading the stack bottom-to-top, g is the element's content
vector: a word embedding for shifted words (with zero cell state), or the
output of a binary tree-LSTM composing the two popped children on REDUCE.
The stack starts with a single zero pair.

Probabilities at step t condition on the hidden state of the current stack
top: a Bernoulli over REDUCE for the next action (only where both actions are
legal), and a categorical over the vocabulary for the word on SHIFT.  The
output softmax weights are the transposed input embedding table.  Steps where
only one action is legal (fewer than two real stack elements forces SHIFT;
exhausted words force REDUCE) contribute exactly zero action log-probability,
which makes the action distribution normalize over all binary trees of the
sentence.  End of sentence is one more forced SHIFT after the final REDUCE
whose word is the EOS token, scored by the same word head.

Scoring runs many rows in lockstep: every action pushes exactly one element,
so the stack top after step t-1 is always the element pushed at step t-1, and
one LSTM step per layer serves all rows at once.  Only REDUCE rows need
row-wise gathers (their below-top state and the two children).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .treebank import REDUCE, SHIFT, TreeRepr, actions_to_tree


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


class _Stepper:
    """Lockstep shift/reduce execution over n rows, one push per step."""

    def __init__(self, model: "GenerativeModel", n_rows: int,
                 rng: np.random.Generator | None):
        self.model = model
        self.n = n_rows
        self.rng = rng
        dim = model.dim
        zero = nn.zeros((n_rows, dim))
        # states_h[layer][step] is the [n, dim] hidden written at that step
        self.states_h = [[zero] for _ in range(model.layers)]
        self.states_c = [[zero] for _ in range(model.layers)]
        self._zero_row = nn.zeros((1, dim))
        guard = ((self._zero_row, 0), (self._zero_row, 0))
        # each stack element: (push_step, (h_ref, c_ref)) where a ref is
        # (tensor, row) into some per-step tensor
        self.stacks: list[list] = [[(0, guard)] for _ in range(n_rows)]
        self.depth = np.zeros(n_rows, dtype=np.int64)
        self.words_used = np.zeros(n_rows, dtype=np.int64)
        self.t = 0

    def _gather(self, refs) -> Tensor:
        groups: dict[int, list] = {}
        order = []
        for pos, (tensor, row) in enumerate(refs):
            g = groups.get(id(tensor))
            if g is None:
                g = [tensor, [], []]
                groups[id(tensor)] = g
                order.append(g)
            g[1].append(row)
            g[2].append(pos)
        if len(order) == 1:
            tensor, rows, _ = order[0]
            if rows == list(range(tensor.shape[0])):
                return tensor
            return ad.take_rows(tensor, rows)
        parts = [ad.take_rows(tensor, rows) for tensor, rows, _ in order]
        stacked = ad.concat(parts, axis=0)
        inverse = np.empty(len(refs), dtype=np.int64)
        k = 0
        for _, rows, positions in order:
            for p in positions:
                inverse[p] = k
                k += 1
        return ad.take_rows(stacked, inverse)

    def top_hidden(self) -> Tensor:
        """Hidden state of every row's stack top, shape [n, dim]."""
        return self.states_h[-1][self.t]

    def step(self, actions: np.ndarray, word_ids: np.ndarray | None) -> None:
        """Advance every row one action; ``word_ids[r]`` is read on SHIFT rows."""
        model = self.model
        p = model.params
        shift_rows = np.flatnonzero(actions == SHIFT)
        reduce_rows = np.flatnonzero(actions == REDUCE)
        if np.any(self.depth[reduce_rows] < 2):
            bad = reduce_rows[self.depth[reduce_rows] < 2][0]
            raise ValueError(
                f"row {bad}: REDUCE with stack depth {self.depth[bad]}")

        composed = None
        if reduce_rows.size:
            left_h, left_c, right_h, right_c = [], [], [], []
            for r in reduce_rows:
                (_, (lh, lc)), (_, (rh, rc)) = self.stacks[r][-2], self.stacks[r][-1]
                left_h.append(lh)
                left_c.append(lc)
                right_h.append(rh)
                right_c.append(rc)
            composed = nn.tree_cell(
                (self._gather(left_h), self._gather(left_c)),
                (self._gather(right_h), self._gather(right_c)),
                p["gen.tree_w"], p["gen.tree_b"])

        embedded = None
        if shift_rows.size:
            if word_ids is None:
                raise ValueError("SHIFT rows present but no word ids given")
            embedded = ad.take_rows(p["emb"], word_ids[shift_rows])

        x_refs = [None] * self.n
        for i, r in enumerate(shift_rows):
            x_refs[r] = (embedded, i)
        for i, r in enumerate(reduce_rows):
            x_refs[r] = (composed[0], i)
        x = ad.dropout(self._gather(x_refs), model.dropout, self.rng)

        # the LSTM state beneath the new push: current top for SHIFT, the
        # element under the two popped children for REDUCE
        below = np.full(self.n, self.t, dtype=np.int64)
        for r in reduce_rows:
            below[r] = self.stacks[r][-3][0]
        inp = x
        for layer in range(model.layers):
            h_refs = [(self.states_h[layer][below[r]], r) for r in range(self.n)]
            c_refs = [(self.states_c[layer][below[r]], r) for r in range(self.n)]
            state = (self._gather(h_refs), self._gather(c_refs))
            h, c = nn.lstm_cell(inp, state, p[f"gen.lstm_w{layer}"],
                                p[f"gen.lstm_b{layer}"])
            self.states_h[layer].append(h)
            self.states_c[layer].append(c)
            if layer + 1 < model.layers:
                inp = ad.dropout(h, model.dropout, self.rng)

        step_id = self.t + 1
        for i, r in enumerate(shift_rows):
            ref = ((embedded, i), (self._zero_row, 0))
            self.stacks[r].append((step_id, ref))
        for i, r in enumerate(reduce_rows):
            ref = ((composed[0], i), (composed[1], i))
            self.stacks[r][-2:] = [(step_id, ref)]
        self.depth[shift_rows] += 1
        self.depth[reduce_rows] -= 1
        self.words_used[shift_rows] += 1
        self.t = step_id


@dataclass
class GenerationResult:
    """One ancestral sample from the generative model."""

    ids: tuple[int, ...]
    actions: tuple[int, ...]
    tree: TreeRepr | None
    log_likelihood: float
    truncated: bool
    empty: bool
    eos_at_root: bool


class GenerativeModel:
    """Two-layer stack LSTM with tree-LSTM composition and tied word head."""

    def __init__(self, vocab_size: int, dim: int = 650, layers: int = 2,
                 dropout: float = 0.5, eos_id: int = 1,
                 rng: np.random.Generator | None = None,
                 init_scale: float = nn.INIT_SCALE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab_size = vocab_size
        self.dim = dim
        self.layers = layers
        self.dropout = dropout
        self.eos_id = eos_id
        p = {}
        p["emb"] = nn.make_param(rng, "emb", (vocab_size, dim), init_scale)
        for layer in range(layers):
            p[f"gen.lstm_w{layer}"] = nn.make_param(
                rng, f"gen.lstm_w{layer}", (2 * dim, 4 * dim), init_scale)
            p[f"gen.lstm_b{layer}"] = nn.make_param(
                rng, f"gen.lstm_b{layer}", (4 * dim,), init_scale)
        p["gen.tree_w"] = nn.make_param(rng, "gen.tree_w", (2 * dim, 5 * dim),
                                        init_scale)
        p["gen.tree_b"] = nn.make_param(rng, "gen.tree_b", (5 * dim,),
                                        init_scale)
        p["gen.action_w"] = nn.make_param(rng, "gen.action_w", (dim,),
                                          init_scale)
        p["gen.action_b"] = nn.make_param(rng, "gen.action_b", (1,),
                                          init_scale)
        p["gen.word_b"] = nn.make_param(rng, "gen.word_b", (vocab_size,),
                                        init_scale)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        """All generative parameters, including the shared embedding table."""
        return dict(self.params)

    # -- scoring ------------------------------------------------------------

    def joint_log_likelihood_batch(self, ids: np.ndarray, actions: np.ndarray,
                                   rng: np.random.Generator | None = None
                                   ) -> tuple[Tensor, Tensor]:
        """(terminal, action) log-likelihood per row, each shape [n].

        ``ids`` is [n, T]; ``actions`` is [n, 2T-1] over rows of equal length.
        Pass ``rng`` to enable dropout.  The terminal term includes the final
        EOS event; the action term sums Bernoulli log-probs over free steps.
        """
        ids = np.asarray(ids, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        n, t_len = ids.shape
        steps = 2 * t_len - 1
        if actions.shape != (n, steps):
            raise ValueError(
                f"actions must be [{n}, {steps}] for length {t_len}, "
                f"got {actions.shape}")
        if np.any((actions != SHIFT) & (actions != REDUCE)):
            raise ValueError("actions must be 0 (SHIFT) or 1 (REDUCE)")
        if np.any((actions == SHIFT).sum(axis=1) != t_len):
            raise ValueError(f"every row must contain exactly {t_len} SHIFTs")

        p = self.params
        emb_t = ad.transpose(p["emb"])
        stepper = _Stepper(self, n, rng)
        zero_one = Tensor(np.zeros(1))
        action_terms = []
        word_terms = []
        for step in range(steps):
            acts = actions[:, step]
            free = (stepper.depth >= 2) & (stepper.words_used < t_len)
            context = ad.dropout(stepper.top_hidden(), self.dropout, rng)
            if free.any():
                logits = ad.add_broadcast(
                    ad.matmul(context, p["gen.action_w"]), p["gen.action_b"])
                signed = ad.mul(logits, Tensor(1.0 - 2.0 * acts))
                action_terms.append(
                    ad.mul(ad.softplus(signed),
                           Tensor(-free.astype(np.float64))))
            shift_rows = np.flatnonzero(acts == SHIFT)
            if shift_rows.size:
                ctx_rows = ad.take_rows(context, shift_rows)
                logp = ad.log_softmax(
                    ad.add_row(ad.matmul(ctx_rows, emb_t), p["gen.word_b"]),
                    axis=1)
                picked = ad.pick_per_row(
                    logp, ids[shift_rows, stepper.words_used[shift_rows]])
                spread = np.full(n, shift_rows.size, dtype=np.int64)
                spread[shift_rows] = np.arange(shift_rows.size)
                word_terms.append(
                    ad.take_rows(ad.concat([picked, zero_one], 0), spread))
            word_col = ids[np.arange(n), stepper.words_used % t_len]
            stepper.step(acts, word_col)

        context = ad.dropout(stepper.top_hidden(), self.dropout, rng)
        logp = ad.log_softmax(
            ad.add_row(ad.matmul(context, emb_t), p["gen.word_b"]), axis=1)
        word_terms.append(
            ad.pick_per_row(logp, np.full(n, self.eos_id, dtype=np.int64)))

        terminal = ad.sum_axis(ad.stack0(word_terms), 0)
        if action_terms:
            action = ad.sum_axis(ad.stack0(action_terms), 0)
        else:
            action = Tensor(np.zeros(n))
        return terminal, action

    def joint_log_likelihood(self, ids, tree_or_actions) -> tuple[float, float]:
        """(terminal, action) log-likelihood of one sentence/tree, eval mode."""
        if isinstance(tree_or_actions, TreeRepr):
            acts = tree_or_actions.actions
        else:
            acts = tuple(tree_or_actions)
            actions_to_tree(acts, len(ids))
        ids = np.asarray(ids, dtype=np.int64)
        terminal, action = self.joint_log_likelihood_batch(
            ids[None, :], np.asarray(acts, dtype=np.int64)[None, :])
        return terminal.data[0].item(), action.data[0].item()

    # -- sampling -----------------------------------------------------------

    def sample_actions_conditional(self, ids, k: int,
                                   rng: np.random.Generator
                                   ) -> tuple[np.ndarray, np.ndarray]:
        """Sample k action sequences with the words held fixed.

        Draws from the conditional action prior p(z | generated words): free
        steps use the Bernoulli head, forced steps take the only legal action.
        Returns (actions [k, 2T-1], action log-prob [k]).
        """
        ids = np.asarray(ids, dtype=np.int64)
        t_len = ids.shape[0]
        steps = 2 * t_len - 1
        p = self.params
        stepper = _Stepper(self, k, None)
        actions = np.zeros((k, steps), dtype=np.int64)
        logprob = np.zeros(k)
        for step in range(steps):
            hidden = stepper.top_hidden().data
            logits = hidden @ p["gen.action_w"].data + p["gen.action_b"].data[0]
            p_reduce = _sigmoid(logits)
            must_shift = stepper.depth < 2
            must_reduce = stepper.words_used >= t_len
            draw = rng.random(k) < p_reduce
            acts = np.where(must_shift, SHIFT,
                            np.where(must_reduce, REDUCE,
                                     np.where(draw, REDUCE, SHIFT)))
            free = ~(must_shift | must_reduce)
            chose_reduce = acts == REDUCE
            with np.errstate(divide="ignore"):
                term = np.where(chose_reduce, np.log(p_reduce),
                                np.log1p(-p_reduce))
            logprob += np.where(free, term, 0.0)
            actions[:, step] = acts
            stepper.step(acts, ids[stepper.words_used % t_len])
        return actions, logprob

    def generate(self, rng: np.random.Generator,
                 max_len: int = 60) -> GenerationResult:
        """Ancestral sampling of one (sentence, tree) pair.

        Stops when the word head draws EOS (flagged ``empty`` if that is the
        very first word) or when ``max_len`` words have been emitted (flagged
        ``truncated``).  Any constituents still open at that point are closed
        by probability-free REDUCEs, mirroring how scoring treats actions
        after the last word.
        """
        if max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {max_len}")
        p = self.params
        stepper = _Stepper(self, 1, None)
        emb_t = p["emb"].data.T
        ids: list[int] = []
        actions: list[int] = []
        total = 0.0
        truncated = False
        eos_at_root = False
        while True:
            hidden = stepper.top_hidden().data[0]
            logit = hidden @ p["gen.action_w"].data + p["gen.action_b"].data[0]
            p_reduce = float(_sigmoid(logit))
            can_reduce = stepper.depth[0] >= 2
            if can_reduce and len(ids) >= max_len:
                truncated = True
                break
            if can_reduce and rng.random() < p_reduce:
                total += np.log(p_reduce)
                actions.append(REDUCE)
                stepper.step(np.array([REDUCE]), None)
                continue
            if can_reduce:
                total += np.log1p(-p_reduce)
            if len(ids) >= max_len:
                truncated = True
                break
            word_logits = hidden @ emb_t + p["gen.word_b"].data
            word_logits -= word_logits.max()
            probs = np.exp(word_logits)
            probs /= probs.sum()
            word = int(rng.choice(self.vocab_size, p=probs))
            total += np.log(probs[word])
            if word == self.eos_id:
                eos_at_root = stepper.depth[0] <= 1
                break
            ids.append(word)
            actions.append(SHIFT)
            stepper.step(np.array([SHIFT]), np.array([word]))
        if not ids:
            return GenerationResult((), (), None, total, truncated, True,
                                    eos_at_root)
        while stepper.depth[0] >= 2:
            actions.append(REDUCE)
            stepper.step(np.array([REDUCE]), None)
        tree = actions_to_tree(tuple(actions), len(ids))
        return GenerationResult(tuple(ids), tuple(actions), tree, total,
                                truncated, False, eos_at_root)


class RNNLM:
    """Two-layer LSTM language model with tied embeddings (the baseline)."""

    def __init__(self, vocab_size: int, dim: int = 650, layers: int = 2,
                 dropout: float = 0.5, eos_id: int = 1,
                 rng: np.random.Generator | None = None,
                 init_scale: float = nn.INIT_SCALE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab_size = vocab_size
        self.dim = dim
        self.layers = layers
        self.dropout = dropout
        self.eos_id = eos_id
        p = {}
        p["emb"] = nn.make_param(rng, "emb", (vocab_size, dim), init_scale)
        for layer in range(layers):
            p[f"lm.lstm_w{layer}"] = nn.make_param(
                rng, f"lm.lstm_w{layer}", (2 * dim, 4 * dim), init_scale)
            p[f"lm.lstm_b{layer}"] = nn.make_param(
                rng, f"lm.lstm_b{layer}", (4 * dim,), init_scale)
        p["lm.word_b"] = nn.make_param(rng, "lm.word_b", (vocab_size,),
                                       init_scale)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def log_likelihood_batch(self, ids: np.ndarray,
                             rng: np.random.Generator | None = None) -> Tensor:
        """Per-sentence log-likelihood including the EOS event, shape [n]."""
        ids = np.asarray(ids, dtype=np.int64)
        n, t_len = ids.shape
        p = self.params
        emb_t = ad.transpose(p["emb"])
        zero = nn.zeros((n, self.dim))
        states = [(zero, zero) for _ in range(self.layers)]
        terms = []
        for pos in range(t_len + 1):
            context = ad.dropout(states[-1][0], self.dropout, rng)
            logp = ad.log_softmax(
                ad.add_row(ad.matmul(context, emb_t), p["lm.word_b"]), axis=1)
            target = (ids[:, pos] if pos < t_len
                      else np.full(n, self.eos_id, dtype=np.int64))
            terms.append(ad.pick_per_row(logp, target))
            if pos < t_len:
                x = ad.dropout(ad.take_rows(p["emb"], ids[:, pos]),
                               self.dropout, rng)
                new_states = []
                inp = x
                for layer in range(self.layers):
                    h, c = nn.lstm_cell(inp, states[layer],
                                        p[f"lm.lstm_w{layer}"],
                                        p[f"lm.lstm_b{layer}"])
                    new_states.append((h, c))
                    if layer + 1 < self.layers:
                        inp = ad.dropout(h, self.dropout, rng)
                states = new_states
        return ad.sum_axis(ad.stack0(terms), 0)
