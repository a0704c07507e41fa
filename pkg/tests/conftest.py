import numpy as np
import pytest


@pytest.fixture(scope="session", autouse=True)
def warm_compiled_kernels():
    """Compile the numba kernels once so timed tests measure steady state."""
    from uveqfed.codec import UVeQFedCodec, UVeQFedConfig
    from uveqfed.analysis import conditional_error_monte_carlo
    for lattice in ("scalar", "hex"):
        cfg = UVeQFedConfig(lattice=lattice, rate=4.0, master_seed=0)
        cd = UVeQFedCodec(cfg)
        h = np.linspace(-1, 1, 16)
        cd.decode(cd.encode(h, 0, 0), 0, 0)
        probe = UVeQFedConfig(lattice=lattice, rate=4.0,
                              rate_constrained=False, master_seed=0)
        conditional_error_monte_carlo(probe, h, trials=6, spot_trials=1)
