#!/usr/bin/env python3
# Copyright (C) 2026 The skv1 authors
# SPDX-License-Identifier: Apache-2.0
"""Writes the bundled training corpus: plain English prose from a small grammar."""

import argparse
import random

NAMES = ["Ada", "Bram", "Cora", "Dov", "Elsa", "Finn", "Greta", "Hugo", "Iris", "Jonas",
         "Kira", "Lev", "Mira", "Nils", "Orla", "Piet", "Rosa", "Sven", "Tova", "Ugo"]
PLACES = ["the mill", "the harbor", "the orchard", "the old bridge", "the market", "the chapel",
          "the forest road", "the lighthouse", "the quarry", "the river bank", "the school",
          "the inn", "the north field", "the library", "the station"]
OBJECTS = ["a lantern", "a letter", "a basket of apples", "a silver key", "an old map", "a loaf of bread",
           "a wooden box", "a bell", "a coil of rope", "a small boat", "a jar of honey", "a brass compass",
           "a bundle of wool", "a clock", "a lamp"]
ADJS = ["quiet", "cold", "bright", "narrow", "busy", "empty", "green", "grey", "warm", "windy",
        "crowded", "distant", "steep", "dark", "golden"]
TIMES = ["In the morning", "At noon", "Before dawn", "In the evening", "Late that night",
         "On the first day of spring", "After the rain", "When the bells rang", "At the end of the week"]
VERBS = [("carried", "to"), ("brought", "to"), ("left", "at"), ("found", "near"), ("hid", "behind"),
         ("mended", "at"), ("sold", "at"), ("lost", "near")]
MOODS = ["glad", "tired", "worried", "curious", "patient", "silent", "restless", "hopeful"]
WEATHER = ["The wind came from the sea", "A thin rain fell", "The sky was clear",
           "Snow lay on the roofs", "Fog rolled over the hills", "The sun was low"]


def sentence(rng, cast):
    a, b = rng.sample(cast, 2)
    place, obj = rng.choice(PLACES), rng.choice(OBJECTS)
    kind = rng.randrange(8)
    if kind == 0:
        verb, prep = rng.choice(VERBS)
        return f"{rng.choice(TIMES)}, {a} {verb} {obj} {prep} {place}."
    if kind == 1:
        return f"{a} said to {b}, \"Have you seen {obj} at {place}?\""
    if kind == 2:
        return f"\"No,\" said {b}, \"but the road to {place} is {rng.choice(ADJS)} today.\""
    if kind == 3:
        return f"{rng.choice(WEATHER)}, and {a} felt {rng.choice(MOODS)}."
    if kind == 4:
        n = rng.randrange(2, 13)
        return f"{a} counted {n} steps from {place} to the gate, then {n + rng.randrange(1, 5)} steps back."
    if kind == 5:
        return f"{b} walked with {a} past {place}, where the path was {rng.choice(ADJS)} and {rng.choice(ADJS)}."
    if kind == 6:
        verb, prep = rng.choice(VERBS)
        return f"It was {b} who {verb} {obj} {prep} {place}, and {a} knew it."
    return f"{a} and {b} waited at {place} until the light was {rng.choice(ADJS)}."


def chapter(rng, index):
    cast = rng.sample(NAMES, 4)
    lines = [f"Chapter {index}", ""]
    for _ in range(rng.randrange(6, 12)):
        lines.append(" ".join(sentence(rng, cast) for _ in range(rng.randrange(3, 7))))
        lines.append("")
    return "\n".join(lines)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/corpus.txt")
    parser.add_argument("--bytes", type=int, default=1_000_000)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()
    rng = random.Random(args.seed)
    parts, size, index = [], 0, 1
    while size < args.bytes:
        text = chapter(rng, index) + "\n"
        parts.append(text)
        size += len(text.encode("utf-8"))
        index += 1
    data = "".join(parts).encode("utf-8")[: args.bytes]
    with open(args.out, "wb") as f:
        f.write(data)


if __name__ == "__main__":
    main()
