"""Collects one verdict line per acceptance criterion for the terminal summary."""
VERDICTS = []


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)
    return ok
