"""Clean accuracy against certified accuracy for several softmax temperatures.

With the network held at Lipschitz constant 1, the temperature of the
cross-entropy decides how much training favours wide margins over fitting
every pixel.

    python scripts/temperature_tradeoff.py --taus 1,5,20
"""
import argparse

import numpy as np

from segcert import certify, lipnet


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--taus", default="1,5,20")
    ap.add_argument("--eps", default="0,0.1,0.2,0.4,0.8")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    taus = [float(t) for t in args.taus.split(",")]
    eps = [float(e) for e in args.eps.split(",")]

    train = lipnet.generate_synthetic_dataset(args.seed, 200)
    test = lipnet.generate_synthetic_dataset(args.seed + 1, 50)
    xs, ys = lipnet.stack_dataset(test)
    print("tau   " + " ".join(f"eps={e:<5}" for e in eps))
    for tau in taus:
        model = lipnet.train_toy(lipnet.build_toy_model(seed=args.seed), train, args.steps,
                                 temperature=tau, seed=args.seed)
        cfg = certify.CertConfig(model.global_lip, 2.0, eps)
        logits = lipnet.forward(model, xs)
        crpa = np.mean([certify.crpa(lg, y, cfg) for lg, y in zip(logits, ys)], axis=0)
        print(f"{tau:<5g} " + " ".join(f"{c:9.4f}" for c in crpa))


if __name__ == "__main__":
    main()
