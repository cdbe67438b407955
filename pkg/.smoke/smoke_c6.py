"""Desk-scale smoke run for the HNO-vs-SNO safety comparison (criterion 6).

Generates a seed-0 dataset pair, trains both models at candidate learning
rates, and prints per-pair collision rates on shared test sets.
"""
import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, "/root/pkg/src")

from hjival import games, pmp, rollout, training, datasets
from hjival import neural_operator as nop

ROOT = Path("/root/pkg/.smoke")
PAIRS = [games.TypePair(1, 1), games.TypePair(1, 5),
         games.TypePair(5, 1), games.TypePair(5, 5)]
spec = games.make_spec("narrow_road")


def get_or_make(path, fn):
    path = Path(path)
    if path.exists():
        return np.load(path, allow_pickle=True)["arr_0"].item()
    out = fn()
    np.savez(path, np.array(out, dtype=object))
    return out


def main():
    t_start = time.time()
    # datasets
    def gen(n_per_pair, seed):
        _, samples, fails = pmp.generate_dataset(spec, PAIRS, n_per_pair, seed=seed)
        return {k: v for k, v in samples.items()}

    hno_samples = get_or_make(ROOT / "hno_ds.npz", lambda: gen(25, 100))
    print(f"[{time.time()-t_start:7.1f}s] hno dataset: {hno_samples['t'].shape[0]} samples", flush=True)
    sno_samples = get_or_make(ROOT / "sno_ds.npz", lambda: gen(50, 200))
    print(f"[{time.time()-t_start:7.1f}s] sno dataset: {sno_samples['t'].shape[0]} samples", flush=True)
    pool = training.sample_pinn_pool(spec, PAIRS, 100, seed=300)

    # shared test sets, 25 per cell for the smoke
    def make_tests():
        out = {}
        for tp in PAIRS:
            x0s, info = rollout.build_test_set(spec, tp, 25, seed=777)
            out[tp.astuple()] = x0s
            print(f"   test set {tp.astuple()}: {info}", flush=True)
        return out

    tests = get_or_make(ROOT / "tests.npz", make_tests)
    print(f"[{time.time()-t_start:7.1f}s] test sets ready", flush=True)

    results = {}
    for lr in (1e-4, 1e-3):
        for mode, samples, iters in (("hno", hno_samples, (10000, 20000)),
                                     ("sno", sno_samples, (0, 30000))):
            tag = f"{mode}_lr{lr:g}"
            ckpt = ROOT / f"{tag}.ckpt"
            if ckpt.exists():
                op = nop.load_operator(ckpt)
            else:
                cfg = training.TrainConfig(
                    mode=mode, learning_rate=lr, batch_size=256,
                    pretrain_iters=iters[0], refine_iters=iters[1],
                    seed=0, checkpoint_every=10**9, log_every=5000)
                t0 = time.time()
                op, log = training.train(spec, samples, pool if mode == "hno" else None,
                                         cfg, ROOT / f"train_{tag}")
                nop.save_operator(op, ckpt)
                print(f"[{time.time()-t_start:7.1f}s] trained {tag} in {time.time()-t0:.0f}s; "
                      f"last terms {log[-1]['terms']}", flush=True)
            rates = {}
            for tp in PAIRS:
                x0s = tests[tp.astuple()]
                ctrl = rollout.operator_controller(op, spec, tp)
                res = rollout.closed_loop_rollout(
                    ctrl, spec, tp, x0s, rollout.RolloutConfig(n_test=len(x0s)),
                    guard=rollout._guard_bounds(op))
                rates[str(tp.astuple())] = float(res.unsafe.mean())
            results[tag] = rates
            print(f"[{time.time()-t_start:7.1f}s] {tag}: {rates}", flush=True)
    (ROOT / "results.json").write_text(json.dumps(results, indent=1))
    print("DONE", flush=True)


if __name__ == "__main__":
    main()
