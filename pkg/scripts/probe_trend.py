"""Per-layer word translation accuracy for encoder and decoder, with sub-layer ablations."""
import argparse
import time

from _common import add_common, corpus_and_model
from layerlab.probing import ProbeConfig, random_encoder_control, run_probe_suite


def main():
    p = argparse.ArgumentParser(description=__doc__)
    add_common(p)
    p.add_argument("--random-encoder", action="store_true", help="also run the random-encoder control")
    p.add_argument("--csv", help="write the report CSV here")
    args = p.parse_args()

    corpus, model = corpus_and_model(args)
    cfg = ProbeConfig(steps=args.probe_steps, seed=args.seed)
    t0 = time.perf_counter()
    suite = run_probe_suite(model, corpus, cfg)
    print(suite.report.to_markdown())
    print(f"suite took {time.perf_counter() - t0:.0f}s")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(suite.report.to_csv())
    if args.random_encoder:
        res = random_encoder_control(model, corpus, cfg)
        emb = suite.report.get("encoder", 0).accuracy
        print(f"random encoder: embedding {res.acc_embedding:.2f}, last layer {res.acc_last_layer:.2f}"
              f" (trained embedding {emb:.2f})")


if __name__ == "__main__":
    main()
