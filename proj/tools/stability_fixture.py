#!/usr/bin/env python3
"""Pick the stability-contrast cell from a sweep and write the regression fixture.

    normlab sweep configs/stability_sweep.json          # writes <out>/sweep.csv
    tools/stability_fixture.py configs/stability_sweep.json <out>/sweep.csv \
        tests/fixtures/stability_contrast.json

A qualifying cell is a (depth, lr) pair where Post-LN trips the divergence
detector while BranchNorm finishes without divergence at final loss < 0.5. The
shallowest, then smallest-lr, qualifying cell is recorded together with the
whole measured grid. When no cell qualifies the fixture still records the grid,
plus the cell where BranchNorm converges and Post-LN ends furthest behind, with
"contrast": false, and the exit status is 1.
"""

import argparse
import csv
import json
import sys

LOSS_BOUND = 0.5


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", help="sweep config used for the run")
    ap.add_argument("csv", help="sweep.csv written by `normlab sweep`")
    ap.add_argument("fixture", help="output fixture path")
    args = ap.parse_args()

    with open(args.config) as f:
        config = json.load(f)
    with open(args.csv, newline="") as f:
        rows = list(csv.DictReader(f))

    cells: dict[tuple[int, float], dict[str, dict]] = {}
    for r in rows:
        key = (int(r["depth"]), float(r["lr"]))
        cells.setdefault(key, {})[r["strategy"]] = {
            "final_loss": float(r["final_loss"]),
            "diverged": r["diverged"] == "1",
            "steps": int(r["steps"]),
            "error": r["error"],
        }

    grid = []
    chosen = None
    for (depth, lr), by in sorted(cells.items()):
        post, branch = by.get("postln"), by.get("branchnorm")
        ok = (post is not None and branch is not None and post["diverged"] and not branch["diverged"]
              and not branch["error"] and branch["final_loss"] < LOSS_BOUND)
        grid.append({"depth": depth, "lr": lr, "postln": post, "branchnorm": branch, "contrast": ok})
        if ok and chosen is None:
            chosen = (depth, lr, post, branch)

    contrast = chosen is not None
    if not contrast:
        print("no (depth, lr) cell shows the contrast", file=sys.stderr)
        for g in grid:
            p, b = g["postln"], g["branchnorm"]
            print(f"  depth {g['depth']:>2} lr {g['lr']:<6g} postln {p['final_loss']:.4f} div={p['diverged']}"
                  f"  branchnorm {b['final_loss']:.4f} div={b['diverged']}", file=sys.stderr)
        near = [g for g in grid if g["postln"] and g["branchnorm"] and not g["branchnorm"]["diverged"]
                and g["branchnorm"]["final_loss"] < LOSS_BOUND]
        if not near:
            return 1
        g = max(near, key=lambda g: g["postln"]["final_loss"] - g["branchnorm"]["final_loss"])
        chosen = (g["depth"], g["lr"], g["postln"], g["branchnorm"])

    depth, lr, post, branch = chosen
    base = {k: v for k, v in config.items() if k not in ("sweep", "output_dir")}
    fixture = {
        "description": ("Post-LN trips the divergence detector, BranchNorm converges (same cell, same seeds)"
                        if contrast else
                        "No cell shows the contrast; closest cell: BranchNorm converges, Post-LN plateaus"),
        "config": base,
        "contrast": contrast,
        "cell": {"depth": depth, "lr": lr},
        "measured": {
            "postln": {k: post[k] for k in ("final_loss", "diverged", "steps")},
            "branchnorm": {k: branch[k] for k in ("final_loss", "diverged", "steps")},
        },
        "grid": grid,
    }
    with open(args.fixture, "w") as f:
        json.dump(fixture, f, indent=2)
        f.write("\n")
    print(f"cell depth={depth} lr={lr}: postln diverged={post['diverged']} after {post['steps']} steps "
          f"(final loss {post['final_loss']:.4f}), branchnorm final loss {branch['final_loss']:.4f}")
    return 0 if contrast else 1


if __name__ == "__main__":
    sys.exit(main())
