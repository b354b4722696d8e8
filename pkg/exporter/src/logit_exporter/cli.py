"""CLI: export per-stage logits from real models into a UQC1 score table."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportJob, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="uqc-export",
        description="Dump per-stage classifier logits (and MAC estimates) to UQC1",
    )
    parser.add_argument("--models", required=True, help="comma-separated stage models, e.g. m1.pt,m2.pt or resnet18,resnet34")
    parser.add_argument("--data", required=True, help=".npz file (x, optional y) or ImageFolder directory")
    parser.add_argument("--domain", required=True, choices=["id", "ood"])
    parser.add_argument("--out", required=True)
    parser.add_argument("--macs", help="comma-separated per-stage MAC overrides")
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--limit", type=int, help="export at most this many samples")
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)

    try:
        job = ExportJob(
            models=[m for m in args.models.split(",") if m],
            data=args.data,
            domain=args.domain,
            out=args.out,
            batch_size=args.batch_size,
            mac_override=[float(c) for c in args.macs.split(",")] if args.macs else None,
            device=args.device,
            limit=args.limit,
        )
        path = export(job)
    except ExportError as e:
        print(f"export error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
