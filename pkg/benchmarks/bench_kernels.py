"""Time the compiled row kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--entries 20000]

Each case runs both backends on the same inputs, checks that they agree to
rounding, and prints the best-of-``repeat`` time per call.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from gsrformer import kernels


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def scan_inputs(rng, entries: int, dim: int, role_types: int = 190, max_roles: int = 6):
    counts = rng.integers(1, max_roles + 1, size=entries)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    e_types = np.concatenate([rng.choice(role_types, size=c, replace=False) for c in counts])
    e_feats = _unit(rng.normal(size=(offsets[-1], dim)))
    e_verbs = _unit(rng.normal(size=(entries, dim)))
    q_types = rng.choice(role_types, size=max_roles, replace=False)
    q_feats = _unit(rng.normal(size=(max_roles, dim)))
    q_verb = _unit(rng.normal(size=dim))
    return q_feats, q_types, q_verb, offsets, e_types, e_feats, e_verbs


def cases(rng, entries: int):
    x = rng.normal(size=(4096, 64))
    gamma, beta = rng.normal(size=64), rng.normal(size=64)
    y = kernels.fallback.softmax_rows(x)
    gy = rng.normal(size=x.shape)
    _, xhat, rstd = kernels.fallback.layer_norm_rows(x, gamma, beta, 1e-5)
    return {
        "softmax_rows 4096x64": ("softmax_rows", (x,)),
        "softmax_rows_backward": ("softmax_rows_backward", (y, gy)),
        "log_softmax_rows": ("log_softmax_rows", (x,)),
        "layer_norm_rows 4096x64": ("layer_norm_rows", (x, gamma, beta, 1e-5)),
        "layer_norm_rows_backward": ("layer_norm_rows_backward", (gy, xhat, rstd, gamma)),
        "sorted_sum_rows 4096x64": ("sorted_sum_rows", (x,)),
        f"role_similarity_scan {entries} frames d=512": ("role_similarity_scan", scan_inputs(rng, entries, 512)),
    }


def _agree(a, b) -> bool:
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, rtol=1e-10, atol=1e-12) for x, y in zip(a, b))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--entries", type=int, default=20000, help="index size for the retrieval scan")
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<44}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for label, (name, inputs) in cases(rng, args.entries).items():
        py, cy = getattr(kernels.fallback, name), getattr(kernels.compiled, name)
        if not _agree(py(*inputs), cy(*inputs)):
            raise SystemExit(f"{name}: backends disagree")
        t_py = min(timeit.repeat(lambda: py(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: cy(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<44}{t_py:>12.3f}{t_cy:>14.3f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
