"""Two global factors (instrument and octave) with the enriched decoder."""
from common import base_spec, parser, run_all, write_csv

if __name__ == "__main__":
    ap = parser(__doc__)
    ap.add_argument("--l-z", type=int, default=16)
    ap.add_argument("--decoder", default="enriched", choices=("factorised", "enriched"))
    ap.add_argument("--inference", default="full", choices=("factorised", "full"))
    args = ap.parse_args()
    specs = [base_spec(args, seed=s, l_z=args.l_z, octaves=2, decoder_mode=args.decoder,
                       inference_mode=args.inference) for s in args.seeds]
    write_csv(run_all(specs, factors=("instrument", "octave")), args.out)
