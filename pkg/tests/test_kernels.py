import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from srptsim import _jit

HERE = Path(__file__).parent


def _probe(tmp_path, flag):
    out = tmp_path / f"probe_{flag}.npz"
    env = dict(os.environ, SRPTSIM_NUMBA=flag)
    subprocess.run([sys.executable, str(HERE / "_kernel_probe.py"), str(out)], env=env,
                   check=True, timeout=600)
    return dict(np.load(out))


@pytest.mark.slow
def test_compiled_and_interpreted_kernels_agree(tmp_path):
    fast = _probe(tmp_path, "1")
    slow = _probe(tmp_path, "0")
    assert not bool(slow["numba"])
    for key in ("plant", "commands", "cost", "project"):
        assert np.allclose(fast[key], slow[key], rtol=1e-9, atol=1e-9), key
    # a 1e-6 finite-difference step on forces of several hundred newtons leaves
    # Jacobian entries good to about 1e-4 relative, so libm last-bit differences show
    assert np.allclose(fast["ekf"], slow["ekf"], rtol=1e-4, atol=1e-6)


def test_flag_parsing(monkeypatch):
    assert _jit.USE_NUMBA in (True, False)

    def add(a, b):
        return a + b

    monkeypatch.setattr(_jit, "USE_NUMBA", False)
    assert _jit.kernel(add) is add
