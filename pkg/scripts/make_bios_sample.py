#!/usr/bin/env python3
"""Write a small biography-style corpus to data/raw/bios_sample.csv.

Columns: text, desired_label (profession), harmful_label (gender).
Every row draws from its own RNG seeded by a SHA-256 of the row key, so
the file is identical on every run. Some rows are duplicated or blank on
purpose to exercise the cleaning in ``task-blocking prepare-bios``.
"""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path
import random

# ---------- Paths ----------
REPO_ROOT = Path(__file__).resolve().parent.parent
OUTPUT_PATH = REPO_ROOT / "data" / "raw" / "bios_sample.csv"

# ---------- Controls ----------
NUM_ROWS = 400

PROFESSIONS = {
    "nurse": ["patients", "clinic", "ward", "care", "hospital"],
    "surgeon": ["operations", "surgery", "hospital", "residency", "procedures"],
    "attorney": ["law", "court", "clients", "litigation", "bar"],
    "professor": ["university", "research", "students", "lectures", "papers"],
}
PRONOUNS = {
    "female": ("She", "her", "her"),
    "male": ("He", "his", "him"),
}
TEMPLATES = [
    "{Subj} is a {job} with ten years of experience in {w0}. {Subj} enjoys {w1} and {w2}.",
    "{Subj} works as a {job}. Colleagues praise {poss} focus on {w0} and {w1}.",
    "A {job} by training, {subj} spends most days on {w0}; {poss} interests include {w2}.",
    "{Subj} joined the {w3} team as a {job} and thanks mentors who taught {obj} about {w4}.",
]


# ---------- Helpers ----------
def deterministic_rng(*keys: object) -> random.Random:
    """Create a deterministic RNG seeded from arbitrary keys."""
    h = hashlib.sha256("|".join(str(k) for k in keys).encode("utf-8")).hexdigest()
    return random.Random(int(h[:16], 16))


def make_row(i: int) -> dict[str, str]:
    rng = deterministic_rng("bio", i)
    job = rng.choice(sorted(PROFESSIONS))
    gender = rng.choice(sorted(PRONOUNS))
    subj, poss, obj = PRONOUNS[gender]
    words = PROFESSIONS[job][:]
    rng.shuffle(words)
    text = rng.choice(TEMPLATES).format(
        Subj=subj,
        subj=subj.lower(),
        poss=poss,
        obj=obj,
        job=job,
        **{f"w{k}": w for k, w in enumerate(words)},
    )
    return {"text": text, "desired_label": job, "harmful_label": gender}


def main(output_path: Path = OUTPUT_PATH) -> int:
    rows = [make_row(i) for i in range(NUM_ROWS)]
    rows += [rows[0], rows[1], {"text": "   ", "desired_label": "nurse", "harmful_label": "female"}]
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with output_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["text", "desired_label", "harmful_label"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"Wrote {len(rows)} rows to {output_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
