import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

# criterion number -> list of (label, passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        checks = ACCEPTANCE.get(n)
        if not checks:
            terminalreporter.write_line(f"CRITERION {n}: FAIL (not run)")
            continue
        ok = all(passed for _, passed, _ in checks)
        detail = "; ".join(f"{label}: {'ok' if passed else 'FAILED'} {info}".rstrip() for label, passed, info in checks)
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
