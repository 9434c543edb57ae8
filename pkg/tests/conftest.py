import sys
from pathlib import Path

# make tests/ importable (gradcheck helper) without packaging it
sys.path.insert(0, str(Path(__file__).parent))
