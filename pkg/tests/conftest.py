import sys
from pathlib import Path

# let test modules import sibling helpers (fd_utils) regardless of invocation dir
sys.path.insert(0, str(Path(__file__).parent))
