"""Model evaluation: importance-weighted perplexity and friends.

Once a model is trained, its quality is measured without ever seeing the
inference network's favourite tree alone: the marginal likelihood of each
sentence is estimated by importance sampling over many trees, perplexity
is reported overall and by length bucket, and the induced structure is
scored against gold trees.  A grammaticality probe compares each sentence
with a locally shuffled copy under the generative model.
"""

from importlib import resources

import numpy as np

from urnng.evaluate import evaluate_corpus, format_report, prefer_grammatical
from urnng.synth import Grammar, synth_corpus
from urnng.trainer import TrainConfig, Trainer, build_models
from urnng.treebank import Vocabulary, make_sentence

grammar = Grammar.from_text(
    (resources.files("urnng") / "data" / "default_grammar.txt")
    .read_text(encoding="utf-8"))
train_trees = synth_corpus(grammar, 800, 3, 12, seed=1)
test_trees = synth_corpus(grammar, 60, 4, 12, seed=3)

vocab = Vocabulary.build([t.leaves() for t in train_trees], min_count=2)
train = [make_sentence(t.leaves(), vocab) for t in train_trees]
test = [make_sentence(t.leaves(), vocab) for t in test_trees]

config = TrainConfig(mode="urnng", epochs=3, batch_size=16, samples=4,
                     gen_dim=32, inf_hidden=32, seed=0)
model, inference = build_models(config, len(vocab),
                                rng=np.random.default_rng(config.seed))
Trainer(model, inference, config).train(train, test)

# K importance samples per sentence; K=200 keeps the demo quick, the
# default used in tests and the CLI is 1000.
report = evaluate_corpus(test, model, inference, gold=test_trees, k=200,
                         length_edges=(0, 6, 9, 12), seed=0)
print(format_report(report))

print("Preference for the real sentence over a shuffled copy:")
rng = np.random.default_rng(4)
wins = 0
pairs = 0
for sentence in test[:20]:
    if len(sentence.ids) < 4:
        continue
    shuffled = np.array(sentence.ids)
    rng.shuffle(shuffled)
    if tuple(shuffled) == sentence.ids:
        continue
    choice, margin = prefer_grammatical(sentence.ids, shuffled, model,
                                        inference, k=100, seed=0)
    wins += choice == 0
    pairs += 1
print(f"  picked the original in {wins}/{pairs} pairs")
