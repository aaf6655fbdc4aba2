"""Regenerates the prompt golden files from the criminal templates.

Run from this directory: python3 make_prompt_golden.py
"""
import json
import re
from pathlib import Path

here = Path(__file__).parent
ctx = json.loads((here / "prompt_context.json").read_text())
templates = here.parent / "templates"


def fmt_float(x):
    # Shortest round-trip form, dropping a trailing ".0".
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def joined(items):
    return ", ".join(items) if items else "none"


crim, cell, meta = ctx["criminal"], ctx["cell"], ctx["city_meta"]
targets = joined([f'{t["agent_id"]} ({t["gender"]}, {t["race"]})' for t in ctx["targets"]])
values = {
    "city": meta["city"],
    "mayor": meta["mayor"],
    "party": meta["party"],
    "strategy": meta["strategy"],
    "agent_id": crim["agent_id"],
    "gender": crim["gender"],
    "race": crim["race"],
    "residence": crim["residence"],
    "historical_trajectory": joined(crim["historical_trajectory"]),
    "criminal_record": joined(crim["criminal_record"]),
    "current_location": crim["current_location"],
    "target_str": targets,
    "police_count": str(ctx["police_count"]),
    "desc": cell["semantic_description"],
    "score": fmt_float(cell["safety_score"]),
    "poi_count": str(cell["poi_count"]),
    "population": str(cell["population"]),
    "income": fmt_float(cell["average_income"]),
    "poverty_ratio": fmt_float(cell["poverty_ratio"]),
    "housing_value": fmt_float(cell["housing_value"]),
}


def fill(text):
    return re.sub(r"\{([a-z_][a-z0-9_]*)\}", lambda m: values[m.group(1)], text)


(here / "prompt_golden_system.txt").write_text(fill((templates / "criminal_system.txt").read_text()))
(here / "prompt_golden_user.txt").write_text(fill((templates / "criminal_user.txt").read_text()))
