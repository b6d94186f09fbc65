"""One seed of the scaled softmax / multi-task / JFE comparison.

    python3 demos/replication.py --seed 0 --out /tmp/jfe_rep

Prints EERs, leakage probes and MAPC per method.  The acceptance suite runs
the same setup over three seeds.
"""
import argparse
import time

from jfe.losses import JfeWeights
from jfe.nets import ModelConfig
from jfe.pipeline import evaluate_system, prepare_corpus, train_system
from jfe.synthcorpus import CorpusSpec
from jfe.train import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="jfe_replication")
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--train-channels", type=int, default=1)
    ap.add_argument("--learning-rate", type=float, default=0.001)
    args = ap.parse_args()

    prepared = prepare_corpus(CorpusSpec(n_speakers=20, n_channels=4, n_utterances=6, seed=args.seed), args.out,
                              train_channels=args.train_channels)
    for name, method, weights in (("softmax", "softmax", JfeWeights()), ("mtl", "jfe", JfeWeights(1, 1, 0, 0, 0)),
                                  ("jfe", "jfe", JfeWeights())):
        t0 = time.perf_counter()
        mc = ModelConfig(arch="dvector", lstm_cell=32, lstm_proj=16, attention_dim=16, classifier_hidden=(32,),
                         seed=args.seed)
        tc = TrainConfig(method=method, iterations=args.iterations, learning_rate=args.learning_rate,
                         seed=args.seed, weights=weights)
        model, result = train_system(prepared, mc, tc)
        rep = evaluate_system(model, prepared, result)
        eers = " ".join(f"{k[4:]}={v:.3f}" for k, v in rep.eers.items())
        probes = " ".join(f"{k}={v:.2f}" for k, v in rep.probes.items())
        mapc = "n/a" if rep.mapc is None else f"{rep.mapc:.3f}"
        print(f"{name:8s} {time.perf_counter() - t0:5.0f}s  EER {eers}  probes {probes}  MAPC {mapc}", flush=True)


if __name__ == "__main__":
    main()
