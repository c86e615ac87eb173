"""Shared setup for the experiment scripts: build a corpus and train (or load) a model."""
import os

from layerlab.data import TaskSpec, generate_corpus
from layerlab.model import ModelConfig, build_model
from layerlab.training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train


def add_common(p):
    p.add_argument("--task", default="lexical_swap_reorder",
                   choices=["lexical_swap_reorder", "copy_mod_shift"])
    p.add_argument("--content-vocab", type=int, default=256)
    p.add_argument("--n-pairs", type=int, default=30000)
    p.add_argument("--enc-depth", type=int, default=4)
    p.add_argument("--dec-depth", type=int, default=4)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--steps", type=int, default=2500)
    p.add_argument("--probe-steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache", default="runs", help="directory for cached models")


def corpus_and_model(args):
    corpus = generate_corpus(TaskSpec(kind=args.task, content_vocab=args.content_vocab,
                                      seed=args.seed), args.n_pairs)
    os.makedirs(args.cache, exist_ok=True)
    name = (f"{args.task}_v{args.content_vocab}_n{args.n_pairs}_{args.enc_depth}-{args.dec_depth}"
            f"_d{args.d_model}_s{args.steps}_seed{args.seed}.llab")
    path = os.path.join(args.cache, name)
    if os.path.exists(path):
        return corpus, load_checkpoint(path).to_model().freeze()
    cfg = ModelConfig(encoder_depth=args.enc_depth, decoder_depth=args.dec_depth,
                      d_model=args.d_model, d_ff=2 * args.d_model, vocab_size=len(corpus.vocab),
                      seed=args.seed)
    model = build_model(cfg)
    result = train(model, corpus.train,
                   TrainConfig(steps=args.steps, warmup_steps=min(400, args.steps // 4 + 1),
                               token_batch_budget=1000, checkpoint_interval=max(1, args.steps // 3),
                               seed=args.seed),
                   dev=corpus.dev)
    model = result.averaged(3)
    print(f"trained {name}: dev token accuracy {result.dev_accuracy:.2f}")
    save_checkpoint(path, Checkpoint.from_model(model, args.steps))
    return corpus, model.freeze()
