"""Reconstruction quality and swap F1 as the local latent grows."""
from common import base_spec, parser, run_all, write_csv

if __name__ == "__main__":
    ap = parser(__doc__)
    ap.add_argument("--l-z", type=int, nargs="+", default=[8, 16, 32])
    ap.add_argument("--variants", nargs="+", default=["ts_dsae"])
    args = ap.parse_args()
    specs = [base_spec(args, variant=v, seed=s, l_z=lz)
             for v in args.variants for lz in args.l_z for s in args.seeds]
    write_csv(run_all(specs), args.out)
