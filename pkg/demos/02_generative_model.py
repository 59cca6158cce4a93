"""The stack-structured generative model: scoring and sampling.

The generative model assigns a joint log-likelihood to a (sentence, tree)
pair by interleaving word emissions with binary REDUCE decisions on a
stack.  Summing the joint over every tree of a sentence gives its marginal
likelihood, which is what perplexity evaluation estimates.  This demo
scores all trees of a short sentence, verifies the enumerated marginal,
and then runs the model generatively to sample fresh (sentence, tree)
pairs.
"""

import numpy as np

from urnng import oracle
from urnng.rnng import GenerativeModel

VOCAB = ["<unk>", "</s>", "a", "dog", "ran", "fast"]

model = GenerativeModel(len(VOCAB), dim=24, layers=1, dropout=0.0,
                        rng=np.random.default_rng(1))

words = ["a", "dog", "ran", "fast"]
ids = np.array([VOCAB.index(w) for w in words])

print(f"Sentence: {' '.join(words)}\n")
print("Joint log-likelihood of every tree:")
joints = []
for tree in oracle.enumerate_trees(len(ids)):
    terminal, action = model.joint_log_likelihood(ids, tree)
    joints.append(terminal + action)
    print(f"  {terminal + action:+.4f}  (words {terminal:+.4f}, "
          f"structure {action:+.4f})  {tree.to_bracketed(words)}")

joints = np.array(joints)
top = joints.max()
lse = top + np.log(np.exp(joints - top).sum())
print(f"\nlogsumexp over trees:  {lse:+.6f}")
print(f"exact marginal:        {oracle.exact_marginal(model, ids):+.6f}")

# Ancestral sampling: the same parameters run forward instead of scoring.
# An untrained model babbles, but the samples show the output contract.
print("\nAncestral samples:")
rng = np.random.default_rng(7)
for _ in range(5):
    result = model.generate(rng, max_len=8)
    text = " ".join(VOCAB[i] for i in result.ids) if result.ids else "<empty>"
    flags = " [truncated]" if result.truncated else ""
    print(f"  ll={result.log_likelihood:+8.3f}  {text}{flags}")
    if result.tree is not None:
        shown = [VOCAB[i] for i in result.ids]
        print(f"      {result.tree.to_bracketed(shown)}")
