"""Factorised vs enriched decoder for TS-DSAE at L_z=16 (plus the DSAE baseline)."""
from common import base_spec, parser, run_all, write_csv

if __name__ == "__main__":
    ap = parser(__doc__)
    ap.add_argument("--with-dsae", action="store_true")
    args = ap.parse_args()
    specs = [base_spec(args, seed=s, l_z=16, decoder_mode=d) for d in ("factorised", "enriched") for s in args.seeds]
    if args.with_dsae:
        specs += [base_spec(args, variant="dsae", seed=s, l_z=16) for s in args.seeds]
    write_csv(run_all(specs), args.out)
