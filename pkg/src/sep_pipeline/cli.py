"""``sep-pipeline <stage> --config <file> [--force] [--seed N]``.

Exit codes: 0 success, 1 validation error, 2 missing dependency, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import MissingDependencyError, NumericalError, SepPipelineError, ValidationError
from .parallel import ENV_THREADS

EXIT_OK, EXIT_VALIDATION, EXIT_MISSING, EXIT_NUMERICAL = 0, 1, 2, 3


def _cap_native_threads() -> None:
    # must run before numpy loads its BLAS
    cap = os.environ.get(ENV_THREADS, "").strip()
    if cap.isdigit() and int(cap) > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    from .pipeline import STAGES

    p = argparse.ArgumentParser(prog="sep-pipeline", description=__doc__.splitlines()[0])
    p.add_argument("stage", choices=list(STAGES) + ["all"])
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--force", action="store_true", help="rerun even when inputs are unchanged")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    _cap_native_threads()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .config import validate_config
    from .parallel import thread_count
    from .pipeline import run_pipeline
    from .rng import MAX_SEED

    try:
        cfg = validate_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed <= MAX_SEED:
                raise ValidationError(f"--seed must lie in [0, 2**64), got {args.seed}")
            cfg["seed"] = args.seed
        ran = run_pipeline(cfg, args.stage, force=args.force, threads=thread_count())
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (MissingDependencyError, FileNotFoundError) as e:
        print(f"missing dependency: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SepPipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    print("ran: " + (", ".join(ran) if ran else "nothing (up to date)"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
