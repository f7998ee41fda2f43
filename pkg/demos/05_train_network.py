"""Train the weight/offset network on synthetic patches and compare with plain fitting.

Run: python demos/05_train_network.py
"""

import numpy as np

from jetnormal import micronet as mn
from jetnormal import synth


def rmse_deg(model, samples):
    errs = []
    for s in samples:
        n = model.fit_normal(s.patch)
        errs.append(np.degrees(np.arctan2(np.linalg.norm(np.cross(n, s.gt_local)),
                                          abs(n @ s.gt_local))))
    return float(np.sqrt(np.mean(np.square(errs))))


def main():
    train = synth.make_patches(200, mn.DEFAULT_SCALES, noise_sigma=0.02, outlier_fraction=0.1,
                               seed=1)
    test = synth.make_patches(100, mn.DEFAULT_SCALES, noise_sigma=0.02, outlier_fraction=0.1,
                              seed=2)
    model = mn.FitNet(mn.DEFAULT_SCALES, order=3, seed=0)
    print(f"{model.n_params()} parameters")

    result = mn.train_toy(model, train, steps=500, seed=0)
    for step, sin_loss, _ in result.curve[::100]:
        print(f"  step {step:3d}  batch sin loss {sin_loss:.4f}")

    plain = mn.FitNet(mn.DEFAULT_SCALES, order=3, zero_heads=True)  # uniform weights, no offsets
    print(f"\nheld-out RMSE  plain fit {rmse_deg(plain, test):.2f} deg"
          f"   trained {rmse_deg(result.model, test):.2f} deg")

    # how much weight lands on points far from the (planar) patch surface
    far = near = 0.0
    for s in test:
        w, _ = result.model.predict(s.patch)
        z = np.abs(s.patch.coords[: len(w), 2])
        off = z > 5 * np.median(z)
        far += w[off].sum() / w.sum()
        near += off.mean()
    print(f"share of weight on off-plane points {far / len(test):.3f}"
          f" (they are {near / len(test):.3f} of the points)")


if __name__ == "__main__":
    main()
