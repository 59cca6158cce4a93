"""Synthetic corpora from a small PCFG, for self-contained experiments.

Grammar files are plain text, one rule per line::

    # comments and blank lines are ignored
    S -> NP VP 1.0
    NP -> Det Nom 0.6
    Noun -> dog 0.25

The first left-hand side is the start symbol.  Symbols that never appear on
a left-hand side are terminals.  Each rule expands to one or two
nonterminals or to exactly one terminal, and the probabilities under every
left-hand side must sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import atomic_write_text
from .treebank import DataError, ParseNode

PROB_TOL = 1e-12
EXTINCTION_TOL = 1e-6
EXTINCTION_ITERS = 500

# sampling guards: a proper grammar terminates with probability 1 but can
# still draw rare huge trees; oversize draws count as rejections
MAX_NODES = 10_000
REJECTION_CHECK_EVERY = 1000
MIN_ACCEPT_RATE = 0.01


@dataclass(frozen=True)
class Rule:
    lhs: str
    rhs: tuple[str, ...]
    prob: float


class _Oversize(Exception):
    pass


class Grammar:
    """A proper PCFG in the binary/unary shape described above."""

    def __init__(self, rules: list[Rule]):
        if not rules:
            raise DataError("grammar has no rules")
        self.rules = list(rules)
        self.start = rules[0].lhs
        self.nonterminals = {r.lhs for r in rules}
        self.terminals = sorted({sym for r in rules for sym in r.rhs
                                 if sym not in self.nonterminals})
        self.by_lhs: dict[str, list[Rule]] = {}
        for rule in rules:
            self.by_lhs.setdefault(rule.lhs, []).append(rule)
        self._probs = {lhs: np.array([r.prob for r in group])
                       for lhs, group in self.by_lhs.items()}
        self._check_shape()
        self._check_sums()
        self._check_proper()

    def _check_shape(self) -> None:
        for rule in self.rules:
            kinds = [sym in self.nonterminals for sym in rule.rhs]
            if not (1 <= len(rule.rhs) <= 2):
                raise DataError(f"rule {rule.lhs} -> {' '.join(rule.rhs)}: "
                                "expected one or two symbols")
            if not all(kinds) and kinds != [False]:
                raise DataError(
                    f"rule {rule.lhs} -> {' '.join(rule.rhs)}: terminals "
                    "may only appear alone on the right-hand side")
            if rule.prob <= 0:
                raise DataError(f"rule {rule.lhs} -> {' '.join(rule.rhs)}: "
                                f"probability {rule.prob} must be positive")

    def _check_sums(self) -> None:
        for lhs, probs in self._probs.items():
            if abs(probs.sum() - 1.0) > PROB_TOL:
                raise DataError(f"probabilities for {lhs} sum to "
                                f"{probs.sum()!r}, expected 1")

    def _check_proper(self) -> None:
        """Termination with probability 1, by extinction-probability
        iteration: q(A) <- sum over rules of prob * prod q(children)."""
        q = {nt: 0.0 for nt in self.nonterminals}
        for _ in range(EXTINCTION_ITERS):
            for nt in q:
                total = 0.0
                for rule in self.by_lhs[nt]:
                    term = rule.prob
                    for sym in rule.rhs:
                        if sym in self.nonterminals:
                            term *= q[sym]
                    total += term
                q[nt] = total
        if q[self.start] < 1.0 - EXTINCTION_TOL:
            raise DataError(
                f"grammar is improper: generation from {self.start} "
                f"terminates with probability {q[self.start]:.6f}")

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "Grammar":
        rules = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 4 or parts[1] != "->":
                raise DataError(f"{source}:{lineno}: expected "
                                f"'LHS -> SYM... PROB', got {raw!r}")
            try:
                prob = float(parts[-1])
            except ValueError as err:
                raise DataError(
                    f"{source}:{lineno}: bad probability {parts[-1]!r}"
                ) from err
            rules.append(Rule(parts[0], tuple(parts[2:-1]), prob))
        return cls(rules)

    @classmethod
    def from_file(cls, path) -> "Grammar":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as err:
            raise DataError(f"cannot read grammar {path}: {err}") from err
        return cls.from_text(text, source=str(path))

    def sample_tree(self, rng: np.random.Generator,
                    max_nodes: int = MAX_NODES) -> ParseNode:
        """One ancestral sample; raises _Oversize past the node budget."""
        budget = max_nodes

        def expand(symbol: str) -> ParseNode:
            nonlocal budget
            budget -= 1
            if budget < 0:
                raise _Oversize
            group = self.by_lhs[symbol]
            rule = group[rng.choice(len(group), p=self._probs[symbol])]
            if rule.rhs[0] not in self.nonterminals:
                return ParseNode(symbol, word=rule.rhs[0])
            return ParseNode(symbol, tuple(expand(sym) for sym in rule.rhs))

        return expand(self.start)


def format_tree(node: ParseNode) -> str:
    """Bracketed text that parse_sexprs reads back to an equal tree."""
    if node.is_preterminal:
        return f"({node.label} {node.word})"
    return f"({node.label} {' '.join(format_tree(c) for c in node.children)})"


def synth_corpus(grammar: Grammar, n_sentences: int, min_len: int,
                 max_len: int, seed: int = 0) -> list[ParseNode]:
    """Sample trees whose yields fall inside the length bounds."""
    if n_sentences < 1:
        raise DataError(f"n_sentences must be >= 1, got {n_sentences}")
    if not (1 <= min_len <= max_len):
        raise DataError(f"need 1 <= min_len <= max_len, "
                        f"got [{min_len}, {max_len}]")
    rng = np.random.default_rng(seed)
    trees: list[ParseNode] = []
    attempts = 0
    while len(trees) < n_sentences:
        attempts += 1
        try:
            tree = grammar.sample_tree(rng)
        except _Oversize:
            tree = None
        if tree is not None and min_len <= len(tree.leaves()) <= max_len:
            trees.append(tree)
        if attempts % REJECTION_CHECK_EVERY == 0:
            rate = len(trees) / attempts
            if rate < MIN_ACCEPT_RATE:
                raise DataError(
                    f"rejected {100 * (1 - rate):.1f}% of {attempts} draws; "
                    f"length bounds [{min_len}, {max_len}] do not fit "
                    "the grammar")
    return trees


def write_corpus(trees: list[ParseNode], tokens_path, trees_path) -> None:
    """One tokens line and one bracketed-tree line per sentence."""
    tokens = "".join(" ".join(t.leaves()) + "\n" for t in trees)
    bracketed = "".join(format_tree(t) + "\n" for t in trees)
    atomic_write_text(tokens_path, tokens)
    atomic_write_text(trees_path, bracketed)
