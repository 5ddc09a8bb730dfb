"""Translation sensitivity of backbone layers on a procedural corpus."""

import numpy as np
from _common import parser, setup

from errnet.experiments import sensitivity_corpus, sensitivity_sweep

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--images", type=int, default=50)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--shifts", type=int, nargs="+", default=[0, 5, 10, 20])
    args = p.parse_args()
    tables = sensitivity_sweep(setup(args), sensitivity_corpus(args.images, args.size), args.shifts)
    layers = next(iter(tables.values())).layers
    print("shift   pixel  " + "  ".join(f"{l:>8}" for l in layers) + "  conv5_2<conv2_2")
    for s, t in tables.items():
        frac = t.fraction_below("conv5_2", "conv2_2") if s else float("nan")
        print(f"{s:5d}  {np.nanmean(t.pixel_ratios):6.3f}  " + "  ".join(f"{t.mean[l]:8.3f}" for l in layers)
              + f"  {frac:8.0%}")
