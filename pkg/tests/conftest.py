import numpy as np
import pytest

from polycl.dataset import build_index, make_split
from polycl.volume_io import SliceRecord, make_phantom, preprocess


@pytest.fixture(scope="session")
def phantoms():
    return [make_phantom(s, (48, 48, 40), (4, 8)) for s in range(8)]


@pytest.fixture(scope="session")
def index(phantoms):
    slices = [preprocess(v, 0.3, 16) for v in phantoms]
    split = make_split([v.scan_id for v in phantoms], 2, 2, seed=0)
    return build_index(slices, split)


def toy_records(flags: dict[str, list[bool | None]], size: int = 4) -> list[list[SliceRecord]]:
    """One record list per scan, with the given organ flags per slice."""
    out = []
    for sid, fl in flags.items():
        recs = []
        for k, f in enumerate(fl):
            mask = None if f is None else np.full((size, size), f)
            recs.append(SliceRecord(sid, k, np.zeros((size, size), np.float32), f, mask))
        out.append(recs)
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
