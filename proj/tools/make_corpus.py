#!/usr/bin/env python3
"""Writes the bundled character-level corpus (train/valid/test).

Pseudo-English prose from a small phrase grammar over a generated lexicon:
word shapes and phrase order are learnable, while the particular word
choices are close to random, so a large enough model can memorize the
training text without that helping on held-out text.

    python3 tools/make_corpus.py data/desk
"""

import argparse
import pathlib
import random

ONSETS = ["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w",
          "br", "cl", "dr", "fr", "gr", "pl", "st", "tr", "sh", "ch", "th"]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ou", "ie"]
CODAS = ["", "", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ck"]

DETERMINERS = ["the", "a", "every", "no", "some", "this", "that", "one"]
PREPOSITIONS = ["in", "on", "under", "near", "with", "for", "from", "over", "behind"]
CONJUNCTIONS = ["and", "but", "so", "while", "because"]


def word(rng, syllables):
    return "".join(rng.choice(ONSETS) + rng.choice(VOWELS) + rng.choice(CODAS) for _ in range(syllables))


def lexicon(rng, n, lo, hi, suffix=""):
    words = set()
    while len(words) < n:
        words.add(word(rng, rng.randint(lo, hi)) + suffix)
    words = sorted(words)
    rng.shuffle(words)
    return words


def zipf_choice(rng, items):
    # P(rank r) proportional to 1 / (r + 1)
    weights = [1.0 / (r + 1) for r in range(len(items))]
    return rng.choices(items, weights)[0]


def noun_phrase(rng, lex):
    parts = [rng.choice(DETERMINERS)]
    if rng.random() < 0.4:
        parts.append(zipf_choice(rng, lex["adj"]))
    parts.append(zipf_choice(rng, lex["noun"]))
    return " ".join(parts)


def clause(rng, lex):
    parts = [noun_phrase(rng, lex), zipf_choice(rng, lex["verb"]), noun_phrase(rng, lex)]
    if rng.random() < 0.5:
        parts += [rng.choice(PREPOSITIONS), noun_phrase(rng, lex)]
    return " ".join(parts)


def sentence(rng, lex):
    s = clause(rng, lex)
    if rng.random() < 0.3:
        s += ", " + rng.choice(CONJUNCTIONS) + " " + clause(rng, lex)
    return s[0].upper() + s[1:] + "."


def paragraph(rng, lex):
    return " ".join(sentence(rng, lex) for _ in range(rng.randint(2, 5)))


def text_of_size(rng, lex, n_bytes):
    lines = []
    size = 0
    while size < n_bytes:
        p = paragraph(rng, lex)
        lines.append(p)
        size += len(p) + 1
    return "\n".join(lines) + "\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=1111)
    ap.add_argument("--nouns", type=int, default=400)
    ap.add_argument("--train-bytes", type=int, default=40_000)
    ap.add_argument("--valid-bytes", type=int, default=30_000)
    ap.add_argument("--test-bytes", type=int, default=30_000)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    lex = {
        "noun": lexicon(rng, args.nouns, 1, 3),
        "adj": lexicon(rng, 120, 1, 2, "y"),
        "verb": lexicon(rng, 200, 1, 2, "ed"),
    }
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, n in (("train", args.train_bytes), ("valid", args.valid_bytes), ("test", args.test_bytes)):
        (out / f"{name}.txt").write_text(text_of_size(rng, lex, n), encoding="utf-8")


if __name__ == "__main__":
    main()
