"""PASS/FAIL lines for the acceptance criteria, echoed again in the terminal summary."""
LINES = []


def record(capsys, number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    return ok
