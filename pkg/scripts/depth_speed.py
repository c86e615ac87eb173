"""Trade decoder layers for encoder layers at fixed total depth and time beam decoding."""
import argparse

from layerlab.data import TaskSpec, generate_corpus
from layerlab.evaluation import BeamConfig, bench_depth_tradeoff, render_speed_table
from layerlab.model import ModelConfig
from layerlab.training import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--configs", default="6:6,7:5,8:4,9:3,10:2,11:1")
    p.add_argument("--content-vocab", type=int, default=64)
    p.add_argument("--min-len", type=int, default=10)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--n-pairs", type=int, default=12000)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--steps", type=int, default=700)
    p.add_argument("--sentences", type=int, default=40)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    args = p.parse_args()

    corpus = generate_corpus(TaskSpec(kind="copy_mod_shift", content_vocab=args.content_vocab,
                                      min_len=args.min_len, max_len=args.max_len, seed=args.seed), args.n_pairs)
    configs = [tuple(int(x) for x in c.split(":")) for c in args.configs.split(",")]
    base = ModelConfig(d_model=args.d_model, d_ff=2 * args.d_model, vocab_size=len(corpus.vocab),
                       seed=args.seed)
    tcfg = TrainConfig(steps=args.steps, warmup_steps=min(400, args.steps // 4 + 1),
                       token_batch_budget=1000, checkpoint_interval=args.steps,
                       checkpoints_to_average=1, seed=args.seed)
    report = bench_depth_tradeoff(configs, corpus, tcfg, BeamConfig(), args.reps, args.sentences,
                                  base=base)
    print(report.protocol)
    print(render_speed_table(report))
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.to_csv())


if __name__ == "__main__":
    main()
