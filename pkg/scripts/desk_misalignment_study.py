"""Misaligned-data study: pretrain on aligned pairs, then continue with extra shifted pairs
supervised by the pixel loss or by the alignment-invariant loss."""

from _common import parser, setup

from errnet.experiments import desk_misalignment_study
from errnet.training import ablation_table

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--total", type=int, default=200)
    p.add_argument("--unaligned", type=int, default=80)
    p.add_argument("--pretrain-steps", type=int, default=400)
    p.add_argument("--finetune-steps", type=int, default=400)
    p.add_argument("--max-shift", type=int, default=10)
    p.add_argument("--seed", type=int, default=3)
    args = p.parse_args()
    study = desk_misalignment_study(setup(args), args.total, args.unaligned, pretrain_steps=args.pretrain_steps,
                        finetune_steps=args.finetune_steps, max_shift=args.max_shift, seed=args.seed)
    print(f"pretrained: {study.pretrained_psnr:.3f} dB")
    print(ablation_table(study.results))
