"""Compiled kernels versus the numpy fallback.

Times each hot kernel at working sizes, then two end-to-end jobs that lean
on them: a balanced label-tree build and plus-variant training steps.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""
import argparse
import json
import time

import numpy as np
import scipy.sparse as sp

from shortxc.tensor import kernels


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_cases(rng):
    x = np.ascontiguousarray(rng.standard_normal((128, 32, 300)))
    cols = np.ascontiguousarray(rng.standard_normal((128, 72, 32 * 16)))
    ids = rng.integers(0, 50_000, size=128 * 32).astype(np.int64)
    grad = np.ascontiguousarray(rng.standard_normal((128 * 32, 300)))
    g = np.ascontiguousarray(rng.standard_normal((256, 1664)))
    W = np.ascontiguousarray(rng.standard_normal((20_000, 1664)))
    b = np.zeros(20_000)
    idx = np.stack([rng.choice(20_000, 800, replace=False) for _ in range(256)]).astype(np.int64)
    counts = np.full(256, 800, dtype=np.int64)
    dz = np.ascontiguousarray(rng.standard_normal((256, 800)))
    scores = np.ascontiguousarray(rng.standard_normal((256, 65_536)))
    X = sp.random(20_000, 5_000, density=0.004, format="csr", random_state=0)
    X.sort_indices()
    ip, ix, dv = X.indptr.astype(np.int64), X.indices.astype(np.int64), X.data.astype(np.float64)
    rows = np.arange(20_000, dtype=np.int64)
    left = rng.random(20_000) < 0.5
    s1, s3 = np.zeros(5_000), np.zeros((3, 5_000))
    return {
        "im2col1d": lambda k: k.im2col1d(x, 16, 4),
        "col2im1d": lambda k: k.col2im1d(cols, 32, 300, 16, 4),
        "embedding_backward": lambda k: k.embedding_backward(ids, grad, 50_000),
        "gather_dot": lambda k: k.gather_dot(g, W, b, idx, counts),
        "gather_dot_backward": lambda k: k.gather_dot_backward(dz, g, W, idx, counts),
        "topk_rows": lambda k: k.topk_rows(scores, 800),
        "csr_row_similarity": lambda k: k.csr_row_similarity(ip, ix, dv, rows, 7, s1),
        "csr_centroid_scores": lambda k: k.csr_centroid_scores(ip, ix, dv, rows, left, s3),
    }


def tree_job():
    from shortxc.label_tree import build_hlt

    V = sp.random(8192, 3000, density=0.003, format="csr", random_state=1)
    return lambda: build_hlt(V, 1024, seed=0)


def train_job():
    from shortxc import toy
    from shortxc.encoder import EncoderConfig
    from shortxc.ingest import build_embedding_table, load_dataset, tfidf
    from shortxc.label_tree import build_hlt, pifa
    from shortxc.model import Model
    from shortxc.trainer import TrainConfig, Trainer

    d = toy.bundled_toy_dir()
    ds = load_dataset(d / "trn_X.txt", d / "trn_Y.txt", seq_len=16, require_labels=True)
    tree = build_hlt(pifa(ds, tfidf(ds)), 8, seed=0)
    enc = EncoderConfig(seq_len=16, embed_dim=64, proj_dim=16)
    table = build_embedding_table(ds.vocab, d=64, seed=0).data

    def run():
        m = Model.create("plus", enc, table, ds.num_labels, tree=tree, seed=0)
        Trainer(m, ds, TrainConfig(epochs=1, batch_size=32, variant="plus", top_k=4, num_clusters=8)).run_epoch()

    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", help="also write the timings here")
    args = ap.parse_args()
    available = kernels.backends()
    names = sorted(available)
    cases = kernel_cases(np.random.default_rng(0))
    jobs = {"build_hlt(L=8192, L'=1024)": tree_job(), "plus epoch (toy)": train_job()}
    results = {}
    for label, fn in list(cases.items()) + list(jobs.items()):
        row = {}
        for name in names:
            with kernels.use_backend(name) as mod:
                row[name] = _best((lambda: fn(mod)) if label in cases else fn, args.repeat)
        results[label] = row
    width = max(len(k) for k in results)
    print(f"{'case':<{width}}  " + "  ".join(f"{n:>10}" for n in names) + ("  speedup" if len(names) > 1 else ""))
    for label, row in results.items():
        line = f"{label:<{width}}  " + "  ".join(f"{row[n] * 1e3:>8.2f}ms" for n in names)
        if "cython" in row:
            line += f"  {row['numpy'] / row['cython']:>6.1f}x"
        print(line)
    if "cython" not in available:
        print("compiled extension not built; only the numpy fallback was timed")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
