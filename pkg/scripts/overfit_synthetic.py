#!/usr/bin/env python3
"""Overfit the planted synthetic set until retrieval is perfect.

Writes a dataset, trains with per-epoch evaluation, and reports the epoch
at which rSum reaches 600 in both directions.
"""
import argparse
import tempfile
import time
from pathlib import Path

from sshnet import featureio, model, objective, retrieval
from sshnet.config import SMALL_DIMS, SMALL_MODEL
from sshnet.objective import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--images", type=int, default=64)
    ap.add_argument("--captions", type=int, default=5)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--noise", type=float, default=0.05)
    args = ap.parse_args()

    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as d:
        featureio.synth_dataset(d, args.images, args.captions, args.seed,
                                SMALL_DIMS, noise=args.noise)
        bundles, texts, _ = featureio.load_dataset(Path(d) / "manifest.json")

        def cb(epoch, loss, params):
            table = model.embed_dataset(bundles, texts, params, SMALL_MODEL,
                                        SMALL_DIMS)
            sim = retrieval.similarity_matrix(table.image_embs,
                                              table.text_embs)
            report = retrieval.evaluate(sim, table.image_index)
            print("epoch %3d  loss %.5f  rsum %.1f" % (epoch + 1, loss,
                                                       report.rsum))
            return report.rsum == 600.0

        cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                          seed=args.seed)
        res = objective.train(bundles, texts, SMALL_DIMS, SMALL_MODEL, cfg,
                              epoch_callback=cb)
    status = "saturated" if res.stopped_early else "budget exhausted"
    print("%s after %d epochs (%.1f s total)"
          % (status, res.epochs_run, time.perf_counter() - t0))


if __name__ == "__main__":
    main()
