import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "likelihood normalization",
    3: "oracle equivalences",
    4: "detector identities",
    5: "entropy separation, desk scale",
    6: "rank agreement of mean scores",
    7: "center vs corner ablation",
    8: "real-data smoke (opt-in)",
    9: "determinism and formats",
}

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}
    config.addinivalue_line("markers", "criterion(n): acceptance test for criterion n")


@pytest.fixture
def acceptance(request):
    """``record(ok, detail)`` stores one verdict line and fails the test when ``ok`` is false."""
    results = request.config.stash[_RESULTS]
    n = request.node.get_closest_marker("criterion").args[0]
    results[n] = ("FAIL", "stopped before reaching a verdict")

    def record(ok, detail=""):
        results[n] = ("PASS" if ok else "FAIL", detail)
        print(f"criterion {n} {results[n][0]}: {detail}")
        assert ok, f"criterion {n} ({CRITERIA[n]}) failed: {detail}"

    def skip(reason):
        results[n] = ("SKIP", reason)
        pytest.skip(reason)

    record.skip = skip
    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        verdict, detail = results.get(n, ("----", "not selected"))
        terminalreporter.write_line(f"[{verdict}] {n}. {name}: {detail}")
