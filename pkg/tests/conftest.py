import torch

torch.set_num_threads(1)

_CRITERIA: dict[int, dict] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    num, title = mark.args
    rec = _CRITERIA.setdefault(num, {"title": title, "ok": True, "seconds": 0.0, "ran": False})
    rec["seconds"] += call.duration
    if call.excinfo is not None:
        rec["ok"] = False
        rec["why"] = call.excinfo.exconly().splitlines()[0][:140]
    if call.when == "call":
        rec["ran"] = True


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        r = _CRITERIA[num]
        status = "PASS" if r["ok"] and r["ran"] else "FAIL"
        line = f"criterion {num:2d} {status}  {r['title']}  ({r['seconds']:.1f} s)"
        if status == "FAIL" and r.get("why"):
            line += f"  -> {r['why']}"
        tr.write_line(line)
