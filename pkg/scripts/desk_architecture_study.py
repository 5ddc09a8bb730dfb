"""Architecture ablation at desk scale: every arm gets the same corpus and step budget."""

from _common import parser, setup

from errnet.experiments import desk_architecture_study
from errnet.network import ARMS
from errnet.training import ablation_table

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--arms", nargs="+", default=list(ARMS))
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--train", type=int, default=64)
    p.add_argument("--eval", type=int, default=16)
    p.add_argument("--seed", type=int, default=2)
    args = p.parse_args()
    results = desk_architecture_study(setup(args), args.arms, args.train, args.eval, args.steps, args.seed)
    print(ablation_table(results))
