import sys
import json
import platform
import subprocess
import venv
from pathlib import Path
from typing import Dict, List, Tuple

MIN_PYTHON = (3, 9)
VENV_DIR = Path('.venv')
ENV_FILE = Path('.env')
REQUIREMENTS = Path('requirements.txt')
BUNDLED_CONFIGS = ('configs/reference_demo.yaml', 'configs/random_small.yaml', 'configs/two_state_uniform.json')

# Smoke imports run inside the venv after installation
NUMERIC_PROBES = {
    'numpy': "import numpy as np; np.random.Generator(np.random.PCG64(np.random.SeedSequence((1, 2))))",
    'scipy': "from scipy import linalg; linalg.eigvalsh([[2.0, 0.0], [0.0, 1.0]])",
    'networkx': "import networkx as nx; nx.is_aperiodic(nx.DiGraph([(0, 0)]))",
}


class DependencyChecker:
    """Bootstrap a td-lsys working copy: interpreter, venv, requirements, numeric smoke tests, .env"""

    def __init__(self, root: Path = Path('.')):
        self.root = root
        self.windows = platform.system().lower() == 'windows'
        bin_dir = 'Scripts' if self.windows else 'bin'
        self.venv_python = root / VENV_DIR / bin_dir / ('python.exe' if self.windows else 'python')
        self.activate_script = root / VENV_DIR / bin_dir / 'activate'
        self.env_defaults = {'TD_LSYS_OUTPUT_DIR': 'output'}

    def requirements(self) -> List[Tuple[str, str]]:
        """(distribution name, full specifier) pairs"""
        pairs = []
        for line in (self.root / REQUIREMENTS).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            name = line
            for op in ('>=', '==', '<=', '~=', '>', '<'):
                name = name.split(op, 1)[0]
            pairs.append((name.strip(), line))
        return pairs

    def check_interpreter(self) -> bool:
        if sys.version_info[:2] < MIN_PYTHON:
            print(f"Error: td-lsys needs Python {MIN_PYTHON[0]}.{MIN_PYTHON[1]}+, found {platform.python_version()}")
            return False
        print(f"Python {platform.python_version()} OK")
        return True

    def ensure_venv(self) -> bool:
        target = self.root / VENV_DIR
        if target.exists():
            print(f"Using existing virtual environment {target}")
            return True
        try:
            venv.create(target, with_pip=True)
        except Exception as e:
            print(f"Error creating virtual environment: {str(e)}")
            return False
        print(f"Created virtual environment {target}")
        return True

    def _pip(self, *args: str) -> subprocess.CompletedProcess:
        return subprocess.run([str(self.venv_python), '-m', 'pip', *args], capture_output=True, text=True, check=True)

    def install_requirements(self) -> List[str]:
        """Install into the venv; returns requirement names that are still absent"""
        try:
            self._pip('install', '--upgrade', 'pip')
            self._pip('install', '-r', str(self.root / REQUIREMENTS))
            listing: Dict[str, str] = {p['name'].lower(): p['version']
                                       for p in json.loads(self._pip('list', '--format=json').stdout)}
        except subprocess.CalledProcessError as e:
            print(f"Error installing requirements: {e.stderr or str(e)}")
            return [name for name, _ in self.requirements()]

        absent = []
        for name, spec in self.requirements():
            version = listing.get(name.lower()) or listing.get(name.lower().replace('_', '-'))
            print(f"  {spec:<24} -> {version or 'missing'}")
            if version is None:
                absent.append(name)
        return absent

    def numeric_smoke_tests(self) -> List[str]:
        failed = []
        for name, snippet in NUMERIC_PROBES.items():
            result = subprocess.run([str(self.venv_python), '-c', snippet], capture_output=True, text=True)
            status = '✅' if result.returncode == 0 else '❌'
            print(f"  {status} {name}")
            if result.returncode != 0:
                failed.append(name)
        return failed

    def check_bundled_configs(self) -> List[str]:
        return [path for path in BUNDLED_CONFIGS if not (self.root / path).exists()]

    def write_env(self) -> bool:
        """Write .env, existing keys win over defaults"""
        path = self.root / ENV_FILE
        values = dict(self.env_defaults)
        try:
            if path.exists():
                for line in path.read_text().splitlines():
                    if '=' in line and not line.lstrip().startswith('#'):
                        key, value = line.strip().split('=', 1)
                        values[key] = value
            lines = ["# td-lsys environment", *(f"{k}={v}" for k, v in values.items())]
            path.write_text('\n'.join(lines) + '\n')
        except OSError as e:
            print(f"Error writing {path}: {str(e)}")
            return False
        print(f"Wrote {path}")
        return True

    def run(self) -> int:
        print("=== td-lsys setup ===")
        if not (self.check_interpreter() and self.ensure_venv()):
            return 1
        print("\nRequirements:")
        absent = self.install_requirements()
        if absent:
            print(f"Error: not installed: {', '.join(absent)}")
            return 1
        print("\nNumeric smoke tests:")
        broken = self.numeric_smoke_tests()
        if broken:
            print(f"Error: broken installs: {', '.join(broken)}")
            return 1
        missing_configs = self.check_bundled_configs()
        if missing_configs:
            print(f"Warning: bundled configs not found: {', '.join(missing_configs)}")
        if not self.write_env():
            return 1
        print(f"\nDone. Activate with: source {self.activate_script}")
        print("Then run: python td_lsys.py run --config configs/reference_demo.yaml")
        return 0


def main():
    sys.exit(DependencyChecker().run())


if __name__ == "__main__":
    main()
