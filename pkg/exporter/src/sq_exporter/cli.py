"""Command line entry point.

    sq-export export --ckpt model.pt --spec export.json --out dir/

Exit codes: 0 success, 1 runtime failure (bad files, failed
verification), 2 usage error. Output files are deterministic:
re-exporting the same checkpoint with the same spec is byte-identical.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ExporterError
from .export import REL_TOLERANCE, export


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sq-export", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="convert a checkpoint to a float model and verify it")
    p.add_argument("--ckpt", required=True, help="torch checkpoint (state dict)")
    p.add_argument("--spec", required=True, help="export spec JSON")
    p.add_argument("--out", required=True, help="output directory for fmodel.json + fmodel.bin")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        res = export(args.ckpt, args.spec, args.out)
    except (ExporterError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(
        f"wrote {res.manifest_path} ({res.node_count} nodes, "
        f"{res.tensor_count} tensors, {res.payload_bytes} payload bytes)"
    )
    print(f"verified: max relative difference {res.max_rel_diff:.3g} < {REL_TOLERANCE:g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
