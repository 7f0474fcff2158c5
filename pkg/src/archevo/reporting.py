"""Turn a run log into CSV tables, a metrics file, and rendered figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .orchestrator import NoChildrenError, best_candidate, success_metrics


def controller_series(records: list[dict]) -> list[dict]:
    """One row per controller step: variance, epsilon, mode, reward."""
    rows = []
    for r in records:
        if r.get("type") != "controller_step":
            continue
        rows.append({
            "step": r["step"],
            "generation": r["generation"],
            "slot": r["slot"],
            "variance": r["variance"],
            "epsilon": r["epsilon"],
            "mode": r["mode"],
            "fallback": r["fallback"],
            "inspiration": r["inspiration"],
            "reward": r["reward"],
        })
    return rows


def bid_series(records: list[dict]) -> list[dict]:
    """Selection-pool bids per generation, with the running best."""
    rows = []
    running = None
    for r in records:
        if r.get("type") != "selection":
            continue
        gen_best = max(entry["bid"] for entry in r["pool"])
        running = gen_best if running is None else max(running, gen_best)
        for entry in r["pool"]:
            rows.append({
                "generation": r["generation"],
                "id": entry["id"],
                "front_index": entry["front_index"],
                "bid": entry["bid"],
                "survived": entry["survived"],
                "generation_best_bid": gen_best,
                "running_best_bid": running,
            })
    return rows


def generation_summary(records: list[dict]) -> list[dict]:
    """Per-generation digest: counts, best accuracy, best bid, pool size."""
    per_gen: dict[int, dict] = {}
    for r in records:
        if r.get("type") == "candidate":
            g = per_gen.setdefault(r["generation"], {
                "generation": r["generation"], "children": 0, "failures": 0,
                "best_acc": None, "best_id": None, "best_bid": None,
                "survivors": None, "pool_size": None,
            })
            g["children"] += 1
            if r["status"] != "ok":
                g["failures"] += 1
                continue
            acc = r["objectives"]["acc"]
            if g["best_acc"] is None or acc > g["best_acc"]:
                g["best_acc"] = acc
                g["best_id"] = r["id"]
        elif r.get("type") == "selection":
            g = per_gen.setdefault(r["generation"], {
                "generation": r["generation"], "children": 0, "failures": 0,
                "best_acc": None, "best_id": None, "best_bid": None,
                "survivors": None, "pool_size": None,
            })
            g["best_bid"] = max(entry["bid"] for entry in r["pool"])
        elif r.get("type") == "generation_end":
            g = per_gen.get(r["generation"])
            if g is not None:
                g["survivors"] = len(r["survivors"])
                g["pool_size"] = len(r["pool"])
    return [per_gen[k] for k in sorted(per_gen)]


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def plot_controller_schedule(rows: list[dict], path: Path) -> None:
    fig, (ax_eps, ax_var) = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
    steps = [r["step"] for r in rows]
    ax_eps.plot(steps, [r["epsilon"] for r in rows],
                marker="o", markersize=3, label="epsilon")
    explored = [r for r in rows if r["mode"] == "explore"]
    if explored:
        ax_eps.scatter([r["step"] for r in explored],
                       [r["epsilon"] for r in explored],
                       color="crimson", zorder=3, s=18, label="explore step")
    ax_eps.set_ylabel("exploration rate")
    ax_eps.legend(loc="best", fontsize=8)
    ax_var.plot(steps, [r["variance"] for r in rows],
                marker="o", markersize=3, color="darkslategray")
    ax_var.set_ylabel("scaled reward variance")
    ax_var.set_xlabel("controller step")
    fig.suptitle("Exploration schedule")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_best_bid(rows: list[dict], path: Path) -> None:
    by_gen: dict[int, dict] = {}
    for r in rows:
        by_gen[r["generation"]] = r
    gens = sorted(by_gen)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(gens, [by_gen[g]["generation_best_bid"] for g in gens],
            marker="o", label="generation best")
    ax.plot(gens, [by_gen[g]["running_best_bid"] for g in gens],
            marker="s", linestyle="--", label="running best")
    ax.set_xlabel("generation")
    ax.set_ylabel("bid")
    ax.set_xticks(gens)
    ax.legend(loc="best", fontsize=8)
    ax.set_title("Best bid per generation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_pareto(records: list[dict], path: Path) -> None:
    """Accuracy against parameter count, survivors highlighted."""
    points = []
    for r in records:
        if r.get("type") == "candidate" and r.get("status") == "ok":
            o = r["objectives"]
            points.append((o["params_millions"], o["acc"], r["id"]))
        elif r.get("type") == "root":
            o = r["candidate"]["objectives"]
            points.append((o["params_millions"], o["acc"], "root"))
    final_survivors: set[str] = set()
    for r in records:
        if r.get("type") == "generation_end":
            final_survivors = {doc["id"] for doc in r["survivors"]}
    fig, ax = plt.subplots(figsize=(6, 4))
    rest = [p for p in points if p[2] not in final_survivors]
    kept = [p for p in points if p[2] in final_survivors]
    if rest:
        ax.scatter([p[0] for p in rest], [p[1] for p in rest],
                   color="lightsteelblue", s=24, label="evaluated")
    if kept:
        ax.scatter([p[0] for p in kept], [p[1] for p in kept],
                   color="darkorange", s=40, label="final survivors")
    ax.set_xlabel("parameters (millions)")
    ax.set_ylabel("accuracy")
    ax.set_title("Objective trade-off")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(records: list[dict], out_dir: str | Path) -> list[Path]:
    """Render every report artifact into out_dir; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    summary_rows = generation_summary(records)
    path = out / "summary.csv"
    _write_csv(path, summary_rows,
               ["generation", "children", "failures", "best_acc", "best_id",
                "best_bid", "survivors", "pool_size"])
    written.append(path)

    controller_rows = controller_series(records)
    path = out / "controller.csv"
    _write_csv(path, controller_rows,
               ["step", "generation", "slot", "variance", "epsilon", "mode",
                "fallback", "inspiration", "reward"])
    written.append(path)

    bid_rows = bid_series(records)
    path = out / "bids.csv"
    _write_csv(path, bid_rows,
               ["generation", "id", "front_index", "bid", "survived",
                "generation_best_bid", "running_best_bid"])
    written.append(path)

    try:
        metrics = success_metrics(records)
    except NoChildrenError:
        metrics = None
    doc = {"success_metrics": metrics, "best_candidate": best_candidate(records)}
    path = out / "success_metrics.json"
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    written.append(path)

    if controller_rows:
        path = out / "controller_schedule.png"
        plot_controller_schedule(controller_rows, path)
        written.append(path)
    if bid_rows:
        path = out / "best_bid.png"
        plot_best_bid(bid_rows, path)
        written.append(path)
    path = out / "pareto.png"
    plot_pareto(records, path)
    written.append(path)
    return written
