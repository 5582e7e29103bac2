import sys
from pathlib import Path

import toml

ROOT = Path(__file__).parent.parent
VERSION_FILE = ROOT / "abclust" / "__version__.py"


def read_project_version() -> str:
    data = toml.loads((ROOT / "pyproject.toml").read_text())
    return data["project"]["version"]


def main():
    """Writes the pyproject version into abclust/__version__.py.
    With `--check` only verifies that both agree (exit 1 otherwise)."""
    version = read_project_version()
    line = f'__version__ = "{version}"\n'
    if "--check" in sys.argv[1:]:
        current = VERSION_FILE.read_text() if VERSION_FILE.is_file() else ""
        if current != line:
            print(f"version file out of sync, expected {version}")
            sys.exit(1)
        print(version)
        return
    VERSION_FILE.write_text(line)
    print(version)
