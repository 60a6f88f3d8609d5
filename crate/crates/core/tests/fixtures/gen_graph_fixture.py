#!/usr/bin/env python3
"""Writes the 50-video annotation fixture and its expected graph.

The expected triples are computed here from first principles (own RNG port,
own split, own support counting) so the Rust builder is checked against an
independent implementation.

Outputs, next to this script:
  graph50.jsonl          annotation records
  graph50.triples.tsv    head<TAB>relation<TAB>tail, sorted
  graph50.splits.tsv     video<TAB>split, sorted
"""
import json
import os
import random

MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15

SEED = 7
TRAIN_RATIO = 0.8
MIN_COUNT = 2


def mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def fnv1a(data):
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & MASK
    return h


def derive_seed(seed, name):
    return mix64(seed ^ mix64(fnv1a(name.encode())))


class SplitMix:
    def __init__(self, seed):
        self.seed = seed
        self.counter = 0

    def next_u64(self):
        self.counter = (self.counter + 1) & MASK
        return mix64((self.seed + self.counter * GAMMA) & MASK)

    def below(self, n):
        return (self.next_u64() * n) >> 64

    def shuffle(self, items):
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


def make_annotations():
    rng = random.Random(2024)
    actions = ["jump", "kick", "run", "throw", "wave"]
    pool = {
        "jump": [("leg", "bend", None), ("leg", "extend", None), ("arm", "raise", None)],
        "kick": [("leg", "swing", "ball"), ("leg", "bend", None), ("torso", "lean", None)],
        "run": [("leg", "alternate", None), ("arm", "swing", None), ("torso", "lean", None)],
        "throw": [("arm", "swing", "ball"), ("hand", "release", "ball"), ("torso", "twist", None)],
        "wave": [("hand", "shake", None), ("arm", "raise", None)],
    }
    records = []
    for i in range(50):
        action = actions[i % 5]
        chosen = [m for m in pool[action] if rng.random() < 0.6]
        if i == 13:
            chosen = []  # a video without any movement observation
        if i == 29:
            chosen.append(("head", "nod", None))  # rare movement
        records.append((f"v{i:03d}", action, chosen))
    # A second record for two videos; the builder merges them.
    records.append(("v004", "wave", [("hand", "wiggle", None)]))
    records.append(("v010", "jump", [("arm", "raise", None)]))
    return records


def record_json(video, action, movements):
    ms = []
    for part, state, obj in movements:
        m = {"part": part, "state": state}
        if obj is not None:
            m["object"] = obj
        ms.append(m)
    return json.dumps({"video_id": video, "action": action, "movements": ms})


def movement_id(part, state, obj):
    return f"movement:{part}:{state}" + (f":{obj}" if obj else "")


def expected(records):
    videos = {}
    for video, action, movements in records:
        entry = videos.setdefault(video, (action, set()))
        entry[1].update(movement_id(*m) for m in movements)

    by_action = {}
    for video in sorted(videos):
        by_action.setdefault(videos[video][0], []).append(video)
    splits = {}
    for action in sorted(by_action):
        order = list(by_action[action])
        SplitMix(derive_seed(SEED, f"split:{action}")).shuffle(order)
        n_train = int(TRAIN_RATIO * len(order) + 0.5)
        for k, v in enumerate(order):
            splits[v] = "train" if k < n_train else "test"

    triples = set()
    support = {}
    for video, (action, movements) in videos.items():
        if splits[video] != "train":
            continue
        v, a = f"video:{video}", f"action:{action}"
        triples.add((v, "v-a", a))
        for m in movements:
            triples.add((m, "b-v", v))
            support[(m, a)] = support.get((m, a), 0) + 1
    for (m, a), n in support.items():
        if n >= MIN_COUNT:
            triples.add((m, "b-a", a))
    reverse = {"v-a": "a-v", "b-v": "v-b", "b-a": "a-b"}
    triples |= {(t, reverse[r], h) for (h, r, t) in triples}
    return sorted(triples), sorted(splits.items())


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    records = make_annotations()
    with open(os.path.join(here, "graph50.jsonl"), "w") as f:
        for r in records:
            f.write(record_json(*r) + "\n")
    triples, splits = expected(records)
    with open(os.path.join(here, "graph50.triples.tsv"), "w") as f:
        for t in triples:
            f.write("\t".join(t) + "\n")
    with open(os.path.join(here, "graph50.splits.tsv"), "w") as f:
        for v, s in splits:
            f.write(f"{v}\t{s}\n")


if __name__ == "__main__":
    main()
