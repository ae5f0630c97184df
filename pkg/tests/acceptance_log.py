"""Pass/fail registry filled by test_acceptance and printed by conftest."""
RESULTS: dict = {}


def record(n: int, ok: bool, detail: str = "") -> bool:
    prev = RESULTS.get(n)
    ok = bool(ok) and (prev is None or prev[0])
    details = [d for d in ((prev[1] if prev else ""), detail) if d]
    RESULTS[n] = (ok, "; ".join(details))
    return ok
