"""Build the bundled English sentence corpus from installed Python docstrings.

Collects docstring prose from the standard library and a few scientific
packages, keeps lines that look like natural-language sentences, and writes
one sentence per line until the size budget is reached.
"""
import importlib
import inspect
import pkgutil
import re
import sys

BUDGET = 1_100_000
PACKAGES = ["json", "email", "http", "logging", "unittest", "xml", "asyncio",
            "concurrent", "multiprocessing", "sklearn", "scipy", "numpy",
            "pandas", "statsmodels", "networkx"]
WORD = re.compile(r"^[A-Za-z][A-Za-z,;:'()\-]*\.?$")


def docstrings(root):
    try:
        pkg = importlib.import_module(root)
    except Exception:
        return
    mods = [pkg]
    if hasattr(pkg, "__path__"):
        for info in pkgutil.walk_packages(pkg.__path__, root + "."):
            if "test" in info.name or "._" in info.name:
                continue
            try:
                mods.append(importlib.import_module(info.name))
            except Exception:
                continue
    seen = set()
    for mod in mods:
        for _, obj in inspect.getmembers(mod):
            doc = getattr(obj, "__doc__", None)
            if isinstance(doc, str) and id(doc) not in seen:
                seen.add(id(doc))
                yield doc


def sentences(doc):
    paras, cur = [], []
    for line in doc.splitlines():
        s = line.strip()
        if not s or s.startswith((">>>", "...", "--", "==")) or s.endswith(("--", "==")):
            if cur:
                paras.append(" ".join(cur))
                cur = []
            continue
        cur.append(s)
    if cur:
        paras.append(" ".join(cur))
    for p in paras:
        for sent in re.split(r"(?<=[.!?])\s+(?=[A-Z])", p):
            words = sent.split()
            if not (6 <= len(words) <= 40) or not sent.endswith("."):
                continue
            if not sent[0].isupper():
                continue
            good = sum(1 for w in words if WORD.match(w))
            if good / len(words) >= 0.9:
                yield sent


def main(out):
    total, kept, seen = 0, [], set()
    for root in PACKAGES:
        for doc in docstrings(root):
            for s in sentences(doc):
                if s in seen:
                    continue
                seen.add(s)
                kept.append(s)
                total += len(s) + 1
                if total >= BUDGET:
                    break
            if total >= BUDGET:
                break
        if total >= BUDGET:
            break
    with open(out, "w", encoding="ascii", errors="ignore") as f:
        for s in kept:
            f.write(s.encode("ascii", "ignore").decode() + "\n")
    print(f"{len(kept)} sentences, {total} bytes", file=sys.stderr)


if __name__ == "__main__":
    main(sys.argv[1])
