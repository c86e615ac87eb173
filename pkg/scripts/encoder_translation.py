"""Translate with encoder layers only (probe + frozen classifier) and score BLEU-1 / BLEU."""
import argparse

from _common import add_common, corpus_and_model
from layerlab.evaluation import BeamConfig, encoder_translation_scores, render_enc_bleu_table
from layerlab.probing import ProbeConfig, ProbeTarget, train_probe


def main():
    p = argparse.ArgumentParser(description=__doc__)
    add_common(p)
    p.add_argument("--sentences", type=int, default=500)
    args = p.parse_args()

    corpus, model = corpus_and_model(args)
    cfg = ProbeConfig(steps=args.probe_steps, seed=args.seed)
    probes = {i: train_probe(model, corpus, ProbeTarget("encoder", i), cfg).probe
              for i in range(model.config.encoder_depth + 1)}
    rows = encoder_translation_scores(model, probes, corpus.test[:args.sentences], BeamConfig())
    print(render_enc_bleu_table(rows))


if __name__ == "__main__":
    main()
