"""Overfit a reduced generator on a handful of synthetic pairs and report the PSNR gain."""

from _common import parser, setup

from errnet.experiments import DESK_LR, overfit_smoke

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, nargs="+", default=[DESK_LR])
    args = p.parse_args()
    bb = setup(args)
    for lr in args.lr:
        r = overfit_smoke(bb, args.pairs, args.steps, lr=lr)
        print(f"lr {lr:g}: identity {r.identity_psnr:.2f} dB -> {r.trained_psnr:.2f} dB "
              f"(gain {r.gain:+.2f}) in {r.seconds:.0f}s")
