import helpers


def pytest_terminal_summary(terminalreporter):
    if not helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(helpers.ACCEPTANCE, key=lambda k: (isinstance(k, str), k)):
        ok, detail = helpers.ACCEPTANCE[key]
        label = f"criterion {key}" if isinstance(key, int) else key
        terminalreporter.write_line(f"{label}: {'PASS' if ok else 'FAIL'} {detail}")
