"""Offsets, weight truncation and per-point order selection on synthetic suites.

The full 20-scene suite takes a minute or so; pass a smaller count to try it
quickly: python demos/04_ablations.py 5
"""

import sys

from jetnormal import experiments as ex


def main(n_scenes=20):
    suite = ex.prepare_scenes(ex.outlier_curvature_suite(n_scenes), queries_per_scene=100)

    print("offset on/off, RMSE in degrees averaged over scenes")
    avg = ex.average_by_config(ex.run_ablation(suite, ex.offset_grid()))
    for o in ex.ORDERS:
        print(f"  order {o}: off {avg[f'order={o},offset=off']:.3f}"
              f"   on {avg[f'order={o},offset=on']:.3f}")

    print("\nweight truncation at order 3, against the offset estimator")
    for name, value in ex.average_by_config(ex.run_ablation(suite, ex.truncation_grid())).items():
        print(f"  {name:16s} {value:.3f}")

    print("\nbest order per point on a half-flat, half-curved scene")
    mix = ex.order_mixing(ex.PreparedScene(ex.mixed_curvature_scene(), 300, 0))
    for o, v in mix.fixed_rmse().items():
        print(f"  fixed order {o}: {v:.3f}")
    print(f"  per-point best: {mix.mixed_rmse():.3f}")
    for o in mix.orders:
        print(f"    order {o} chosen for {(mix.best_order == o).mean():.0%} of points")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
