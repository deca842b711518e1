import pytest

# filled by the acceptance module: criterion id -> (title, passed, detail)
ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        title, ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {title}: {detail}")


@pytest.fixture
def record():
    def _record(key, title, ok, detail):
        ACCEPTANCE[key] = (title, bool(ok), detail)
        print(f"{key} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok
    return _record
