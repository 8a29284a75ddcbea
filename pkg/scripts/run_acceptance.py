"""Populate the acceptance-run cache ahead of ``pytest tests/test_acceptance.py``.

    python scripts/run_acceptance.py            # every run
    python scripts/run_acceptance.py ac3_learned ac3_random
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import acceptance_support as acc  # noqa: E402


def main(names) -> None:
    for name in names or list(acc.RUNS) + ["ac9_segmentation"]:
        if name == "ac9_segmentation":
            print(acc.segmentation_run())
        else:
            print(acc.content_run(name))


if __name__ == "__main__":
    main(sys.argv[1:])
