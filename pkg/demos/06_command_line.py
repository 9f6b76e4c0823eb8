"""The command-line front end, driven in-process.

Builds and saves a backbone, trains from a config, and shows the exit codes
for a bad config and a diverging run.

Run: python3 demos/06_command_line.py
"""

import tempfile
from pathlib import Path

from sherl.cli import main

root = Path(__file__).resolve().parents[1]
minimal = (root / "configs" / "minimal.ini").read_text()

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    print("backbone ->", main(["backbone", "--family", "transformer", "--layers", "12",
                               "--drop", "0,4,8", "--out", str(tmp / "bb.shrl")]))
    print("run ->", main(["run", "--config", str(root / "configs" / "minimal.ini"), "--out", str(tmp)]))
    print("report:", (tmp / "report.json").stat().st_size, "bytes")

    broken = tmp / "broken.ini"
    broken.write_text(minimal.replace("epochs = 2", "epochs = two"))
    print("bad value ->", main(["run", "--config", str(broken)]))

    wild = tmp / "wild.ini"
    wild.write_text(minimal.replace("0.003", "1e300").replace("kind = SHERL", "kind = FullFT"))
    print("diverging run ->", main(["run", "--config", str(wild), "--out", str(tmp)]))
