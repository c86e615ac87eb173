"""Reduced desk-scale presets shared by the slow tests and the acceptance suite.

Trained models are memoised per process so each preset trains once per run.
"""
from functools import lru_cache

from layerlab.data import TaskSpec, generate_corpus
from layerlab.model import ModelConfig, build_model
from layerlab.probing import ProbeConfig
from layerlab.training import TrainConfig, train

PRESETS = {
    "copy": dict(
        task=TaskSpec(kind="copy_mod_shift", content_vocab=64, seed=0),
        n_pairs=12000,
        model=dict(encoder_depth=2, decoder_depth=2),
        train=TrainConfig(steps=600, warmup_steps=200, token_batch_budget=1000,
                          checkpoint_interval=200, checkpoints_to_average=1, seed=0),
    ),
    "swap": dict(
        task=TaskSpec(kind="lexical_swap_reorder", content_vocab=256, seed=0),
        n_pairs=30000,
        model=dict(encoder_depth=4, decoder_depth=4, d_model=16, heads=4, d_ff=32),
        train=TrainConfig(steps=2500, warmup_steps=300, token_batch_budget=1000,
                          checkpoint_interval=2500, checkpoints_to_average=1, seed=0),
    ),
}

# depth-trading benchmark: every (enc, dec) split is trained with this recipe
SPEED = dict(
    task=TaskSpec(kind="copy_mod_shift", content_vocab=64, min_len=10, max_len=20, seed=0),
    n_pairs=12000,
    model=dict(d_model=64, heads=4, d_ff=128),
    train=TrainConfig(steps=700, warmup_steps=200, token_batch_budget=1000,
                      checkpoint_interval=700, checkpoints_to_average=1, seed=0),
    sentences=40,
)

PROBE = ProbeConfig(steps=1000, token_batch_budget=2000, eval_interval=200, seed=0)


@lru_cache(maxsize=None)
def corpus(name):
    p = PRESETS[name]
    return generate_corpus(p["task"], p["n_pairs"])


@lru_cache(maxsize=None)
def trained(name):
    p = PRESETS[name]
    c = corpus(name)
    model = build_model(ModelConfig(vocab_size=len(c.vocab), **p["model"]))
    result = train(model, c.train, p["train"], dev=c.dev)
    return model.freeze(), c, result


@lru_cache(maxsize=None)
def trained_probe(name, side, layer):
    from layerlab.probing import ProbeTarget, train_probe
    model, c, _ = trained(name)
    return train_probe(model, c, ProbeTarget(side, layer), PROBE)


# acceptance results, printed one line per criterion at the end of the session
ACCEPTANCE = {}
