"""Fill the acceptance cache: meta-train every desk-scale run and store the measurements.

Usage: python3 scripts/run_acceptance.py [name ...]
Names: source_comparison curriculum_variants ensemble endless wn nas (default: all, in that order).
Safe to interrupt; rerunning resumes from the last saved checkpoint.
"""
import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import acceptance_experiments as ax  # noqa: E402

ORDER = ("source_comparison", "ensemble", "curriculum_variants", "endless", "wn", "nas")


def main(names):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    ax.setup_threads()
    for name in names or ORDER:
        result = ax.ALL[name]()
        if isinstance(result, dict) and all(hasattr(v, "mean") for v in result.values()):
            for key, rep in result.items():
                print(f"{name} {key}: mean {rep.mean:.4f} ci [{rep.ci_low:.4f}, {rep.ci_high:.4f}]", flush=True)
        else:
            print(f"{name}: done", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
