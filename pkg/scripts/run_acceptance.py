"""Run the acceptance suite; prints one PASS/FAIL line per criterion at the end."""
import sys
from pathlib import Path

import pytest

if __name__ == "__main__":
    root = Path(__file__).resolve().parent.parent
    sys.exit(pytest.main([str(root / "tests" / "test_acceptance.py"), "-v", "-s", *sys.argv[1:]]))
