import pytest

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def acceptance_log(capsys):
    def record(key, passed, detail):
        ACCEPTANCE[key] = (bool(passed), detail)
        with capsys.disabled():
            print(f"\n[acceptance] criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, 8):
        keys = sorted(k for k in ACCEPTANCE if str(k) == str(n) or str(k).startswith(f"{n}."))
        if not keys:
            tr.write_line(f"criterion {n}: NOT RUN")
            continue
        ok = all(ACCEPTANCE[k][0] for k in keys)
        detail = "; ".join(f"{k}: {ACCEPTANCE[k][1]}" for k in keys) if len(keys) > 1 else ACCEPTANCE[keys[0]][1]
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
