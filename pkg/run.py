#!/usr/bin/env python3
"""
Convenience wrapper for direct execution of madiff without installing it.
"""

import sys
from pathlib import Path

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent / "src"))

from madiff.__main__ import main

if __name__ == "__main__":
    sys.exit(main())
