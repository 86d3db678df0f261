"""Independent reference values frozen into the C++ tests.

Run with plain Python + numpy; nothing here imports the library.
"""
import math

import numpy as np


def cosine_alpha_bar(T, s, clip=(1e-5, 0.999)):
    f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    ab, prev = [1.0], 1.0
    for t in range(1, T + 1):
        beta = min(max(1 - (f(t) / f(0)) / prev, clip[0]), clip[1])
        prev *= 1 - beta
        ab.append(prev)
    return ab


def main():
    ab = cosine_alpha_bar(1000, 0.008)
    raw = math.cos((0.5 + 0.008) / 1.008 * math.pi / 2) ** 2 / math.cos(0.008 / 1.008 * math.pi / 2) ** 2
    print(f"alpha_bar[500] clipped={ab[500]:.12f} raw={raw:.12f}")
    print(f"alpha_bar[1000]={ab[1000]:.3e}")

    r = 1e-5
    y = np.array([3e-5, 4e-5])
    norm = np.linalg.norm(y)
    print(f"pseudo_huber d={math.sqrt(norm**2 + r**2) - r:.6e} d'={y / math.sqrt(norm**2 + r**2)}")

    p = np.array([[0.9, 0.1], [0.1, 0.9]])
    pbar = p.mean(axis=0)
    kl = (p * np.log(p / pbar)).sum(axis=1)
    print(f"inception two-sample={math.exp(kl.mean()):.6f}")

    # Frechet, 2-d diagonal: closed form with commuting diagonal covariances.
    mu_a, mu_b = np.array([0.0, 0.0]), np.array([1.0, 0.0])
    va, vb = np.array([1.0, 1.0]), np.array([4.0, 1.0])
    fd = ((mu_a - mu_b) ** 2).sum() + (va + vb - 2 * np.sqrt(va * vb)).sum()
    print(f"frechet 2d={fd}")

    n, K = 64, 8
    remaining = [math.ceil(n * math.cos(math.pi * k / (2 * K)) - 1e-9) for k in range(K + 1)]
    sizes = [remaining[k] - remaining[k + 1] for k in range(K)]
    print(f"mask sizes n=64 K=8 {sizes} sum={sum(sizes)}")

    # Posterior variance at t=500 of the full schedule.
    beta = 1 - ab[500] / ab[499]
    print(f"posterior_variance[500]={beta * (1 - ab[499]) / (1 - ab[500]):.12e}")

    # KL(N(mu, s^2) || N(0, 1)) gradient at (0.5, 1).
    mu, s = 0.5, 1.0
    print(f"kl grad=({mu}, {s - 1 / s})")


if __name__ == "__main__":
    main()
