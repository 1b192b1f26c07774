import numpy as np
import pytest

from oddm_ce.channel import ChannelSpec, PathSet, to_grid
from oddm_ce.modem import build_effective_operator, build_h_tilde, pilot_frames

# acceptance outcomes, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def report(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_model(rng, Nt=2, M=8, N=4, K=1, L=3, paths=None, mode="dense"):
    """Frames, operator, grid and h for a hand-built path list."""
    if paths is None:
        paths = [(0.8, 0, 0, 0.3), (-0.5, 2, 1, -0.7)]
    spec = ChannelSpec(num_paths=len(paths), max_delay_index=L, max_doppler_index=K,
                       num_antennas=Nt, num_delay_bins=M, num_doppler_bins=N)
    grid = to_grid(PathSet.from_paths(paths), spec)
    frames = pilot_frames(Nt, M, N, rng)
    op = build_effective_operator(frames, K, L, mode=mode)
    return frames, op, grid, build_h_tilde(grid, Nt)
