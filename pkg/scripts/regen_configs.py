"""Rewrite scripts/configs/<kind>.json from the built-in defaults."""
import json
import pathlib

from maxlab.config import KINDS, defaults

here = pathlib.Path(__file__).parent / "configs"
here.mkdir(exist_ok=True)
for kind in KINDS:
    (here / f"{kind}.json").write_text(json.dumps(defaults(kind), indent=2, sort_keys=True) + "\n")
    print(here / f"{kind}.json")
