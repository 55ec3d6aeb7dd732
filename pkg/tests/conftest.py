import pytest

ACCEPTANCE_TITLES = {
    1: "least-norm convergence of GRBK / RGRBK(0.8) / MWRBK",
    2: "BK limit and projection invariant",
    3: "RGRBK(theta=1/2) equals GRBK",
    4: "incremental residual matches C - AXB",
    5: "convergence-factor ordering and theta-monotonicity",
    6: "RBK expected-error envelope",
    7: "mini-registry iteration ordering",
    8: "pseudoinverse Penrose conditions",
    9: "blur operator equals 2-D convolution",
    10: "restoration improves PSNR and SSIM",
    11: "vec / Kronecker identity",
}

_results = {}


@pytest.fixture
def record():
    """``record(n, ok, detail)`` stores the outcome of acceptance criterion ``n``."""

    def _record(n, ok, detail):
        _results[n] = (bool(ok), detail)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in _results:
            ok, detail = _results[n]
            tr.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        else:
            tr.write_line(f"criterion {n:>2} NOT RUN  {title}")
