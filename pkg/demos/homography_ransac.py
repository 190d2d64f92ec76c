"""Robust homography fitting on a synthetic point set, with a noise sweep.

    python demos/homography_ransac.py
"""

import numpy as np

from ghsa.coremath import apply_homography, svd_least_squares_homography
from ghsa.fastpath import ransac_homography


def trial(rng, noise, outlier_frac, n=100):
    H0 = np.eye(3)
    H0[:2, :2] += rng.normal(scale=0.15, size=(2, 2))
    H0[:2, 2] = rng.uniform(-10, 10, 2)
    H0[2, :2] = rng.normal(scale=5e-4, size=2)
    src = rng.uniform(0, 128, (n, 2))
    dst = apply_homography(H0, src) + rng.normal(scale=noise, size=(n, 2))
    bad = rng.choice(n, int(outlier_frac * n), replace=False)
    dst[bad] += rng.uniform(20, 60, (len(bad), 1)) * rng.normal(size=(len(bad), 2))
    H_ls = svd_least_squares_homography(src, dst)
    H_r, inl = ransac_homography(src, dst, rng=rng)
    probe = rng.uniform(0, 128, (200, 2))
    err = lambda H: np.linalg.norm(apply_homography(H, probe) - apply_homography(H0, probe),
                                   axis=1).mean()
    exact = set(np.flatnonzero(~inl)) == set(bad)
    return err(H_ls), err(H_r), exact


def main():
    rng = np.random.default_rng(0)
    print("noise_px  outliers  plain_lsq_err  ransac_err  exact_outlier_set")
    for noise in (0.0, 0.3, 1.0):
        for frac in (0.0, 0.1, 0.3):
            res = [trial(rng, noise, frac) for _ in range(30)]
            ls, rs, ex = (np.array(c) for c in zip(*res))
            print(f"{noise:8.1f}  {frac:8.0%}  {ls.mean():13.3f}  {rs.mean():10.3f}  "
                  f"{ex.mean():17.0%}")


if __name__ == "__main__":
    main()
