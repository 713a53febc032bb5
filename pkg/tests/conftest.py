import scenes


def pytest_terminal_summary(terminalreporter):
    if not scenes.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in scenes.ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
