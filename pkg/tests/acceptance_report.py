"""Collects one verdict line per acceptance criterion for the terminal summary."""

import functools

RESULTS: list[str] = []


def record(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    RESULTS.append(line)
    print(line)


def criterion(name: str):
    """Decorate a test returning (ok, detail); prints and records the verdict.

    Exceptions raised before a verdict count as failures too.
    """

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                ok, detail = fn(*args, **kwargs)
            except Exception as exc:
                record(name, False, f"{type(exc).__name__}: {exc}")
                raise
            record(name, ok, detail)
            assert ok, detail

        return run

    return wrap
