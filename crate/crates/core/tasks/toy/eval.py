"""Prints the score stored in submission/score.txt of the current directory."""
import pathlib
import sys

path = pathlib.Path("submission") / "score.txt"
if not path.is_file():
    sys.exit("no submission: run train.py first")
print(float(path.read_text().strip()))
