"""Per-criterion outcomes collected by the acceptance tests."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(cid: int, ok: bool, detail: str) -> bool:
    line = f"C{cid:02d} {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    prev = RESULTS.get(cid)
    if prev is not None:
        ok = ok and prev[0]
        detail = f"{prev[1]}; {detail}"
    RESULTS[cid] = (ok, detail)
    return ok
