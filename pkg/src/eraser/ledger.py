"""Round ledger: the per-round accounting of the data-growth loop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import IntegrityError


@dataclass
class LedgerRow:
    round_name: str
    dataset_source: str
    n_test: int | None
    n_selected: int
    cumulative_train_size: int
    success_rate: float | None = None
    psnr: float | None = None

    def to_dict(self) -> dict:
        return {
            "round_name": self.round_name,
            "dataset_source": self.dataset_source,
            "n_test": self.n_test,
            "n_selected": self.n_selected,
            "cumulative_train_size": self.cumulative_train_size,
            "success_rate": self.success_rate,
            "psnr": self.psnr,
        }


@dataclass
class RoundLedger:
    rows: list[LedgerRow] = field(default_factory=list)

    def validate(self) -> "RoundLedger":
        """Telescoping sums must hold exactly and selections cannot exceed tests."""
        running = 0
        for i, row in enumerate(self.rows):
            running += row.n_selected
            if row.cumulative_train_size != running:
                raise IntegrityError(
                    f"ledger row {i} ({row.round_name!r}): cumulative {row.cumulative_train_size} != {running}"
                )
            if row.n_test is not None and row.n_selected > row.n_test:
                raise IntegrityError(
                    f"ledger row {i} ({row.round_name!r}): selected {row.n_selected} > tested {row.n_test}"
                )
        return self

    def append(self, row: LedgerRow) -> None:
        self.rows.append(row)
        self.validate()

    @property
    def total(self) -> int:
        return self.rows[-1].cumulative_train_size if self.rows else 0

    def cumulative_for(self, round_name: str) -> int:
        for row in self.rows:
            if row.round_name == round_name:
                return row.cumulative_train_size
        raise IntegrityError(f"no ledger row named {round_name!r}")

    def to_json(self) -> str:
        return json.dumps({"rows": [r.to_dict() for r in self.rows]}, sort_keys=True, indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "RoundLedger":
        payload = json.loads(text)
        return cls(rows=[LedgerRow(**r) for r in payload["rows"]]).validate()

    @classmethod
    def load(cls, path: str | Path) -> "RoundLedger":
        return cls.from_json(Path(path).read_text())
