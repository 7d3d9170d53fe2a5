#!/usr/bin/env python3
"""Generates the demo toy model + dataset under fixtures/ and cross-checks
the expected greedy decisions of every decoding method with an independent
simulation of the step math."""
import json
import math
import os

ROOT = os.path.join(os.path.dirname(__file__), "..")
OUT = os.path.join(ROOT, "fixtures")

VOCAB = [
    "</s>", "<unk>", "question:", "context:", "answer:",
    "host-2022", "ev-qatar", "russia", "qatar",
    "boiling-temp", "ev-100c", "90c", "100c",
    "capital-france", "ev-paris", "paris", "lyon",
    "red-planet", "ev-mars", "mars", "venus",
]
TID = {w: i for i, w in enumerate(VOCAB)}
V = len(VOCAB)

ITEMS = [
    # (id, question, context, gold, wrong/distractor, kind)
    ("conf-1", "host-2022", "ev-qatar", "qatar", "russia", "conf"),
    ("conf-2", "boiling-temp", "ev-100c", "100c", "90c", "conf"),
    ("nonconf-1", "capital-france", "ev-paris", "paris", "lyon", "nonconf"),
    ("nonconf-2", "red-planet", "ev-mars", "mars", "venus", "nonconf"),
]


def row(probs):
    out = [0.0] * V
    for tok, p in probs.items():
        out[TID[tok]] = p
    assert abs(sum(out) - 1.0) < 1e-12, probs
    return out


def build_model():
    transitions = {}
    for _id, q, ctx, gold, alt, kind in ITEMS:
        p1_key = f"{TID['question:']},{TID[q]},{TID['answer:']}"
        p2_key = f"{TID['context:']},{TID[ctx]},{TID['answer:']}"
        if kind == "conf":
            transitions[p1_key] = row({alt: 0.8, gold: 0.2})
            transitions[p2_key] = row({alt: 0.55, gold: 0.45})
        else:
            transitions[p1_key] = row({gold: 0.96, alt: 0.04})
            transitions[p2_key] = row({gold: 0.81, alt: 0.19})
        for tok in (gold, alt):
            transitions[str(TID[tok])] = row({"</s>": 1.0})
    return {
        "name": "conflict-demo",
        "vocab": VOCAB,
        "order": 3,
        "transitions": transitions,
        "fallback": [1.0 / V] * V,
    }


# --- independent simulation of one greedy step ------------------------------

FLOOR = 1e-300
RTOL = 1e-9


def log_softmax(v):
    m = max(v)
    z = sum(math.exp(x - m) for x in v)
    lse = m + math.log(z)
    return [x - lse for x in v]


def norm_row(probs):
    return log_softmax([math.log(max(p, FLOOR)) for p in probs])


def entropy(logp):
    return max(0.0, -sum(math.exp(v) * v for v in logp if math.isfinite(v)))


def step_tokens(p1row, p2row, lam=0.25, alpha=1.0, cd_thr=0.1):
    p1 = norm_row(p1row)
    p2 = norm_row(p2row)
    h1 = entropy(p1)
    shift = [-v - h1 for v in p2]
    pd = log_softmax(shift)
    pd = [math.exp(v) for v in pd]
    u = lam * max(pd)
    lraw = min(pd) / lam
    count = sum(1 for v in pd if v < lraw * (1 - RTOL))
    lo = lraw if count > 1 else 0.0
    in_set = [v >= lo * (1 - RTOL) and v <= u * (1 + RTOL) for v in pd]
    g = [a - b for a, b in zip(p2, p1)]
    coiecd = [(p1[i] if in_set[i] else p2[i]) + alpha * g[i] for i in range(V)]
    cad = [(1 + alpha) * p2[i] - alpha * p1[i] for i in range(V)]
    thr = cd_thr * max(math.exp(v) for v in p2)
    cd = [g[i] if math.exp(p2[i]) >= thr * (1 - RTOL) else -math.inf for i in range(V)]
    pick = lambda s: max(range(V), key=lambda i: (s[i], -i))
    return {
        "regular": pick(p2),
        "coiecd": pick(coiecd),
        "cad": pick(cad),
        "cd": pick(cd),
        "verdicts": in_set,
        "count": count,
    }


def main():
    os.makedirs(OUT, exist_ok=True)
    model = build_model()
    with open(os.path.join(OUT, "conflict.json"), "w") as f:
        json.dump(model, f, indent=1)
        f.write("\n")
    with open(os.path.join(OUT, "qa.jsonl"), "w") as f:
        for _id, q, ctx, gold, _alt, _kind in ITEMS:
            f.write(json.dumps({"id": _id, "question": q, "context": ctx,
                                "answers": [gold]}) + "\n")

    print(f"{'item':12} {'regular':10} {'coiecd':10} {'cad':10} {'cd':10}")
    t = model["transitions"]
    for _id, q, ctx, gold, alt, kind in ITEMS:
        p1 = t[f"{TID['question:']},{TID[q]},{TID['answer:']}"]
        p2 = t[f"{TID['context:']},{TID[ctx]},{TID['answer:']}"]
        r = step_tokens(p1, p2)
        names = {k: VOCAB[r[k]] for k in ("regular", "coiecd", "cad", "cd")}
        print(f"{_id:12} {names['regular']:10} {names['coiecd']:10} "
              f"{names['cad']:10} {names['cd']:10}  gold={gold}")
        if kind == "conf":
            assert names["regular"] == alt and names["coiecd"] == gold
            assert names["cad"] == gold and names["cd"] == gold
        else:
            assert names["regular"] == gold and names["coiecd"] == gold
            assert names["cad"] == alt and names["cd"] == alt
    print("fixture expectations hold")


if __name__ == "__main__":
    main()
