"""Post-swap F1 of DSAE vs TS-DSAE (factorised q, L_z=32) over seeds."""
from common import base_spec, parser, run_all, write_csv

if __name__ == "__main__":
    ap = parser(__doc__)
    ap.add_argument("--variants", nargs="+", default=["dsae", "ts_dsae"])
    ap.add_argument("--l-z", type=int, default=32)
    args = ap.parse_args()
    specs = [base_spec(args, variant=v, seed=s, l_z=args.l_z) for v in args.variants for s in args.seeds]
    write_csv(run_all(specs), args.out)
