# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

import json
from typing import Any

CHECK_RESULTS = ("PASS", "FAIL")


class CheckReport:
    """Sections of informational values and PASS/FAIL checks, dumped as JSON."""

    def __init__(self, name: str) -> None:
        self.data: dict[str, Any] = {
            "summary": {
                "name": name,
                "passed": 0,
                "failed": 0,
                "result": "PASS",
            },
            "provenance": {},
            "sections": [],
        }

    def _section(self, section: str) -> dict[str, Any]:
        for s in self.data["sections"]:
            if s["id"] == section:
                return s
        raise AssertionError(f"Could not find section {section}")

    def add_section(self, id: str) -> None:
        for s in self.data["sections"]:
            assert id != s["id"], f"Attempt to create section {id} twice!"
        self.data["sections"].append({"id": id, "info": [], "checks": []})

    def set_provenance(self, **values: Any) -> None:
        self.data["provenance"].update(values)

    def add_info_result(self, section: str, id: str, value: Any) -> None:
        self._section(section)["info"].append({"id": id, "value": value})

    def add_check_result(
        self, section: str, id: str, result: str, summary: str, detail: list[str]
    ) -> None:
        assert result in CHECK_RESULTS, "Check result must be 'PASS' or 'FAIL'"
        self._section(section)["checks"].append(
            {"id": id, "result": result, "summary": summary, "detail": detail}
        )
        self.update_summary()

    def check(self, section: str, id: str, ok: bool, summary: str, detail: list[str]) -> bool:
        self.add_check_result(section, id, "PASS" if ok else "FAIL", summary, detail)
        return ok

    def update_summary(self) -> None:
        checks = [c for s in self.data["sections"] for c in s["checks"]]
        failed = sum(1 for c in checks if c["result"] == "FAIL")
        summary = self.data["summary"]
        summary["passed"] = len(checks) - failed
        summary["failed"] = failed
        summary["result"] = "FAIL" if failed else "PASS"

    @property
    def passed(self) -> bool:
        return self.data["summary"]["failed"] == 0

    def checks(self) -> list[dict[str, Any]]:
        return [c for s in self.data["sections"] for c in s["checks"]]

    def dump(self) -> str:
        return json.dumps(self.data, indent=2)
