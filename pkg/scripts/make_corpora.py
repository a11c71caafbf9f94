#!/usr/bin/env python3
"""Regenerate the two bundled sample corpora (deterministic).

Corpus A is word-salad prose: lowercase words, spaces, sentence punctuation.
Corpus B is ledger-style records: uppercase codes, digits, field separators.
The two have very different byte statistics, which is all the tests need.
"""

from pathlib import Path
import random

WORDS = (
    "the of and to in a is that it was for on are as with his they at be this "
    "have from or one had by word but not what all were we when your can said "
    "there use an each which she do how their if will up other about out many "
    "then them these so some her would make like him into time has look two "
    "more write go see number no way could people my than first water been "
    "call who oil its now find long down day did get come made may part over "
    "new sound take only little work know place year live me back give most "
    "very after thing our just name good sentence man think say great where "
    "help through much before line right too mean old any same tell boy "
    "follow came want show also around form three small set put end does "
    "another well large must big even such because turn here why ask went "
    "men read need land different home us move try kind hand picture again "
    "change off play spell air away animal house point page letter mother "
    "answer found study still learn should america world"
).split()

ITEMS = ("BOLT NUT GEAR CAM ROD PIN PLATE RING SEAL VALVE HOSE CLIP FUSE "
         "LAMP WIRE TUBE DISC SHIM STUD RAIL").split()
DEPOTS = "NTH STH EST WST CTR".split()


def gen_prose(rng: random.Random, target_bytes: int) -> str:
    out = []
    size = 0
    while size < target_bytes:
        n = rng.randint(6, 14)
        words = [rng.choice(WORDS) for _ in range(n)]
        words[0] = words[0].capitalize()
        if rng.random() < 0.2:
            k = rng.randint(1, n - 1)
            words[k] += ","
        sentence = " ".join(words) + rng.choice([".", ".", ".", "?", "!"]) + " "
        if rng.random() < 0.12:
            sentence += "\n"
        out.append(sentence)
        size += len(sentence)
    return "".join(out)[:target_bytes]


def gen_ledger(rng: random.Random, target_bytes: int) -> str:
    out = []
    size = 0
    while size < target_bytes:
        item = rng.choice(ITEMS)
        depot = rng.choice(DEPOTS)
        code = rng.randint(1000, 9999)
        qty = rng.randint(1, 500)
        unit = rng.randint(1, 99) + rng.randint(0, 99) / 100
        total = round(qty * unit, 2)
        flag = rng.choice(["OK", "OK", "OK", "BACKORDER", "HOLD"])
        line = (f"{item}-{code} | DEPOT:{depot} | QTY {qty:>4} @ {unit:6.2f} "
                f"= {total:9.2f} | {flag}\n")
        out.append(line)
        size += len(line)
    return "".join(out)[:target_bytes]


def main():
    assets = Path(__file__).resolve().parents[1] / "src" / "gradsieve" / "assets"
    assets.mkdir(parents=True, exist_ok=True)
    (assets / "corpus_a.txt").write_text(gen_prose(random.Random(20240801), 100_000))
    (assets / "corpus_b.txt").write_text(gen_ledger(random.Random(20240802), 100_000))
    print("wrote", assets / "corpus_a.txt", "and corpus_b.txt")


if __name__ == "__main__":
    main()
