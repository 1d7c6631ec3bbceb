"""Experiment runner: setup, train, attack, trace, report, selftest.

Every subcommand reads one JSON config (see `config`), works inside a run
directory, and records what it did in `manifest.json` so any output file can
be traced back to the exact configuration and seeds that produced it.

Exit codes: 0 success; 2 config/validation errors; 3 training divergence;
4 accusation came back empty (code exhausted / nobody over threshold);
5 missing artifact or input file.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks as atk
from . import config as cfgmod
from . import datasets as ds
from . import evaluation as ev
from . import fedsim
from . import nnengine as nn
from . import tardos
from . import whitebox
from .container import ContainerError, dump_json, load_trc, save_trc
from .fedsim import Strategy, TrainingDivergedError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_EXHAUSTED = 4
EXIT_MISSING = 5


class MissingArtifactError(FileNotFoundError):
    pass


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ----------------------------------------------------------- run directory

def _run_dir(args, cfg) -> Path:
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    if cfg is not None and cfg.raw.get("run_dir"):
        return Path(cfg.raw["run_dir"])
    import os
    return Path(os.environ.get("FLTRACE_RUN_DIR", "runs/default"))


def _load_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if path.exists():
        return json.loads(path.read_text())
    return {"tool_version": __version__, "created_utc": _utc_now(),
            "config": None, "artifacts": {}, "commands": {}}


def _save_manifest(run_dir: Path, manifest: dict) -> None:
    dump_json(run_dir / "manifest.json", manifest)


def _record(run_dir: Path, cfg, command: str, seconds: float,
            info: dict | None = None) -> None:
    manifest = _load_manifest(run_dir)
    manifest["tool_version"] = __version__
    if cfg is not None:
        manifest["config"] = cfg.raw
    entry = {"seconds": round(seconds, 3), "utc": _utc_now()}
    if info:
        entry.update(info)
    manifest["commands"][command] = entry
    _save_manifest(run_dir, manifest)


# -------------------------------------------------------------- artifacts

ART = "artifacts"


def _artifact_paths(run_dir: Path) -> dict[str, Path]:
    art = run_dir / ART
    return {"bias": art / "bias.trc", "codebook": art / "codebook.trc",
            "triggers": art / "triggers.trc", "basis": art / "basis.trc",
            "projection": art / "projection.json",
            "partition": art / "partition.json"}


def _corpus(cfg) -> tuple[ds.PartitionedData, str]:
    """Load and partition the experiment corpus per the config."""
    data = cfg.data
    seeds = cfg.seeds
    x, y, source = ds.resolve_corpus(
        data.get("mnist_dir"), data["corpus_fraction"], seeds["corpus"],
        synthetic_size=data["synthetic_size"])
    fraction = data["corpus_fraction"] if source == "mnist" else 1.0
    part = ds.partition(x, y, data["n_owners"], data["eval_fraction"],
                        seeds["partition"], corpus_fraction=fraction)
    return part, source


def cmd_setup(args) -> int:
    cfg = cfgmod.load_config(args.config, preset=args.preset)
    run_dir = _run_dir(args, cfg)
    paths = _artifact_paths(run_dir)
    paths["bias"].parent.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    code, seeds = cfg.code, cfg.seeds

    bias = tardos.sample_bias_matrix(code["m"], code["q"], code["kappa"],
                                     code["tau"], [seeds["code"], 0])
    book = tardos.generate_codebook(bias, cfg.data["n_owners"],
                                    [seeds["code"], 1])
    triggers = ds.generate_triggers(code["m"], seeds["triggers"])
    basis = whitebox.generate_basis(cfg.whitebox["p"], cfg.data["n_owners"],
                                    seeds["basis"])
    probe = nn.build_model(seed=seeds["model"])
    carrier_len = int(probe.carrier_weights().shape[0])

    bias.save(paths["bias"])
    book.save(paths["codebook"])
    save_trc(paths["triggers"], {"images": triggers.images.astype(np.float64)})
    basis.save(paths["basis"])
    dump_json(paths["projection"], {
        "l": carrier_len, "p": cfg.whitebox["p"],
        "seed": seeds["projection"], "dtype": cfg.whitebox["dtype"]})

    part, source = _corpus(cfg)
    dump_json(paths["partition"], {
        "seed": seeds["partition"], "corpus_seed": seeds["corpus"],
        "source": source, "corpus_fraction": cfg.data["corpus_fraction"],
        "eval_fraction": cfg.data["eval_fraction"],
        "synthetic_size": cfg.data["synthetic_size"],
        "n_owners": part.n_owners, "eval_size": int(len(part.eval_labels)),
        "shard_sizes": [int(len(s)) for s in part.shard_labels]})

    _record(run_dir, cfg, "setup", time.time() - t0, {
        "artifacts": {k: str(v.relative_to(run_dir)) for k, v in paths.items()},
        "corpus_source": source})
    print(f"setup: artifacts written under {run_dir / ART} "
          f"(corpus: {source}, m={code['m']}, owners={cfg.data['n_owners']})")
    return EXIT_OK


@dataclass
class Artifacts:
    bias: tardos.BiasMatrix
    codebook: tardos.CodeBook
    triggers: ds.TriggerSet
    basis: whitebox.OwnerBasis
    projection: whitebox.ProjectionMatrix
    wb_threshold: float
    epsilon: float


def _load_artifacts(cfg, run_dir: Path) -> Artifacts:
    paths = _artifact_paths(run_dir)
    for name in ("bias", "codebook", "triggers", "basis", "projection"):
        if not paths[name].exists():
            raise MissingArtifactError(
                f"expected artifact {paths[name]}; run `fltrace setup` first")
    bias = tardos.BiasMatrix.load(paths["bias"])
    book = tardos.CodeBook.load(paths["codebook"])
    trig_images = load_trc(paths["triggers"])["images"].astype(np.float32)
    triggers = ds.TriggerSet(trig_images, shared=True,
                             seed=cfg.seeds["triggers"])
    basis = whitebox.OwnerBasis.load(paths["basis"])
    desc = json.loads(paths["projection"].read_text())
    projection = whitebox.generate_projection(
        desc["l"], desc["p"], desc["seed"],
        dtype=np.float32 if desc["dtype"] == "float32" else np.float64)
    return Artifacts(bias=bias, codebook=book, triggers=triggers, basis=basis,
                     projection=projection,
                     wb_threshold=cfg.whitebox["threshold"],
                     epsilon=cfg.code["epsilon"])


def _models_dir(run_dir: Path, strategy: str) -> Path:
    return run_dir / "models" / strategy


def _load_copies(run_dir: Path, strategy: str) -> list[nn.ModelParams]:
    d = _models_dir(run_dir, strategy)
    files = sorted(d.glob("owner_*.tfnn")) or list(d.glob("model.tfnn"))
    if not files:
        raise MissingArtifactError(
            f"no checkpoints under {d}; run `fltrace train` first")
    return [nn.load_model(f) for f in files]


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config, preset=args.preset)
    run_dir = _run_dir(args, cfg)
    strategy = Strategy.from_name(args.strategy or cfg.fl["strategy"])
    art = _load_artifacts(cfg, run_dir)
    part, source = _corpus(cfg)
    fl = cfg.fl_config(strategy.value)
    out_dir = _models_dir(run_dir, strategy.value)
    out_dir.mkdir(parents=True, exist_ok=True)
    logs_path = out_dir / "logs.jsonl"
    t0 = time.time()

    triggers = art.triggers
    if strategy.per_owner_triggers:
        triggers = ds.generate_owner_triggers(art.triggers.m,
                                              fl.n_owners,
                                              cfg.seeds["triggers"])
    with open(logs_path, "w") as log_fh:
        def sink(log):
            log_fh.write(json.dumps(log.to_json_dict()) + "\n")
            if args.verbose:
                print(f"  iter {log.iteration}: main={log.main_accuracy} "
                      f"trigger={log.trigger_accuracy} "
                      f"r={log.mean_projection}", flush=True)

        if strategy.federated:
            models, logs = fedsim.run_fl_training(
                fl, part, triggers, art.codebook, art.basis, art.projection,
                log_sink=sink)
        else:
            owner = args.owner or 0
            if strategy is Strategy.INDEPENDENT_WM:
                model, logs = fedsim.train_independent(
                    "FullDataWM", fl, part, triggers=art.triggers,
                    labels=art.codebook.labels[owner],
                    s_col=art.basis.column(owner),
                    projection=art.projection, owner_id=owner)
            else:
                model, logs = fedsim.train_independent(
                    "OwnerBaseline", fl, part, owner_id=owner)
            for log in logs:
                sink(log)
            models = [model]

    if strategy.federated and strategy is not Strategy.NO_WM:
        for j, m in enumerate(models):
            nn.save_model(m, out_dir / f"owner_{j:03d}.tfnn")
    else:
        nn.save_model(models[0], out_dir / "model.tfnn")

    final_acc = nn.evaluate_accuracy(models[0], part.eval_images,
                                     part.eval_labels)
    summary = {"strategy": strategy.value, "corpus_source": source,
               "iterations": fl.total_iterations(part.train_size),
               "final_main_accuracy": final_acc,
               "n_models": len(models), "seconds": round(time.time() - t0, 1)}
    if strategy.watermarks and strategy.federated:
        shared = not strategy.per_owner_triggers
        summary["per_copy_trigger_accuracy"] = [
            ev.trigger_accuracy(m, art.triggers if shared else triggers[j],
                                art.codebook.labels[j])
            for j, m in enumerate(models)]
        summary["per_copy_projection"] = [
            whitebox.project(m.carrier_weights(), art.projection,
                             art.basis.column(j))
            for j, m in enumerate(models)]
    dump_json(out_dir / "train_summary.json", summary)
    _record(run_dir, cfg, f"train:{strategy.value}", time.time() - t0, summary)
    print(f"train {strategy.value}: {len(models)} model(s), "
          f"main accuracy {final_acc:.4f}, {summary['seconds']}s")
    return EXIT_OK


def _attack_data(cfg, part, rng):
    size = cfg.trials.get("attack_data_size")
    n = len(part.eval_labels)
    if size and size < n:
        pick = rng.choice(n, size=size, replace=False)
        return part.eval_images[pick], part.eval_labels[pick]
    return part.eval_images, part.eval_labels


def _post_attack(cfg, name: str):
    trials = cfg.trials
    if name == "None":
        return None
    if name == "FineTune":
        return atk.FineTune(epochs=trials["finetune_epochs"],
                            batch=trials["finetune_batch"],
                            learning_rate=trials["finetune_learning_rate"])
    if name == "Prune":
        return atk.Prune(fraction=trials["prune_fraction"])
    raise cfgmod.SchemaError("attack", f"unknown post-attack {name!r}")


def cmd_attack(args) -> int:
    cfg = cfgmod.load_config(args.config, preset=args.preset)
    run_dir = _run_dir(args, cfg)
    strategy = args.strategy or cfg.fl["strategy"]
    copies = _load_copies(run_dir, strategy)
    part, _ = _corpus(cfg)
    rng = np.random.default_rng(cfg.seeds["trials"])
    if args.colluders:
        colluders = tuple(int(s) for s in args.colluders.split(","))
    else:
        c = args.c or 2
        colluders = tuple(int(j) for j in
                          np.sort(rng.choice(len(copies), c, replace=False)))
    spec = atk.AttackSpec(colluders=colluders,
                          post_attack=_post_attack(cfg, args.post),
                          seed=int(rng.integers(2**31)))
    ax, ay = _attack_data(cfg, part, rng)
    t0 = time.time()
    merged = atk.run_attack(copies, spec, ax, ay)
    name = args.name or (f"{strategy}_c{len(colluders)}_{args.post}")
    out_dir = run_dir / "attacks" / name
    out_dir.mkdir(parents=True, exist_ok=True)
    nn.save_model(merged, out_dir / "model.tfnn")
    acc = nn.evaluate_accuracy(merged, part.eval_images, part.eval_labels)
    manifest = {"strategy": strategy, "spec": spec.describe(),
                "main_accuracy": acc,
                "source_models": str(_models_dir(run_dir, strategy)),
                "seconds": round(time.time() - t0, 1)}
    dump_json(out_dir / "attack.json", manifest)
    _record(run_dir, cfg, f"attack:{name}", time.time() - t0, manifest)
    print(f"attack {name}: colluders={list(colluders)} post={args.post} "
          f"main accuracy {acc:.4f}")
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = cfgmod.load_config(args.config, preset=args.preset)
    run_dir = _run_dir(args, cfg)
    suspect_path = Path(args.suspect)
    if not suspect_path.exists():
        raise MissingArtifactError(f"suspect checkpoint {suspect_path} not found")
    art = _load_artifacts(cfg, run_dir)
    suspect = nn.load_model(suspect_path)
    t0 = time.time()
    report: dict = {"suspect": str(suspect_path), "mode": args.mode}
    accused_any = False

    if args.mode in ("blackbox", "both"):
        bb = ev.blackbox_trace(suspect, art.triggers, art.codebook, art.bias,
                               art.epsilon)
        report["blackbox"] = {
            "accused": None if bb.exhausted else int(bb.accused),
            "t_star": None if bb.exhausted else int(bb.t_star),
            "exhausted": bool(bb.exhausted),
            "threshold_at_stop": bb.threshold_at_stop,
            "final_scores": [float(s) for s in bb.final_scores]}
        accused_any |= not bb.exhausted
    if args.mode in ("whitebox", "both"):
        wb = ev.whitebox_trace(suspect, art.projection, art.basis,
                               art.wb_threshold)
        report["whitebox"] = wb.to_json_dict()
        accused_any |= len(wb.accused) > 0

    reports_dir = run_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    out = reports_dir / f"trace_{suspect_path.stem}.json"
    dump_json(out, report)
    _record(run_dir, cfg, f"trace:{suspect_path.stem}", time.time() - t0,
            {"report": str(out.relative_to(run_dir)),
             "accused_any": accused_any})
    if "blackbox" in report:
        bbr = report["blackbox"]
        print(f"blackbox: accused={bbr['accused']} t*={bbr['t_star']} "
              f"exhausted={bbr['exhausted']}")
    if "whitebox" in report:
        print(f"whitebox: accused={report['whitebox']['accused']}")
    print(f"report: {out}")
    return EXIT_OK if accused_any else EXIT_EXHAUSTED


def cmd_report(args) -> int:
    cfg = cfgmod.load_config(args.config, preset=args.preset) \
        if args.config else None
    run_dir = _run_dir(args, cfg)
    if not run_dir.exists():
        print(f"error: run directory {run_dir} does not exist", file=sys.stderr)
        return EXIT_VALIDATION

    if args.run_trials:
        if cfg is None:
            print("error: --run-trials needs --config", file=sys.stderr)
            return EXIT_VALIDATION
        return _run_trials(args, cfg, run_dir)

    found = False
    for summary_path in sorted(run_dir.glob("models/*/train_summary.json")):
        found = True
        s = json.loads(summary_path.read_text())
        line = (f"train {s['strategy']}: main={s['final_main_accuracy']:.4f} "
                f"models={s['n_models']}")
        if "per_copy_trigger_accuracy" in s:
            ta = s["per_copy_trigger_accuracy"]
            rr = s.get("per_copy_projection", [])
            line += (f" trigger_acc[min..max]={min(ta):.3f}..{max(ta):.3f}")
            if rr:
                line += f" r[min..max]={min(rr):.3f}..{max(rr):.3f}"
        print(line)
    for attack_path in sorted(run_dir.glob("attacks/*/attack.json")):
        found = True
        a = json.loads(attack_path.read_text())
        print(f"attack {attack_path.parent.name}: "
              f"colluders={a['spec']['colluders']} "
              f"main={a['main_accuracy']:.4f}")
    for trace_path in sorted(run_dir.glob("reports/trace_*.json")):
        found = True
        r = json.loads(trace_path.read_text())
        bb = r.get("blackbox", {})
        wb = r.get("whitebox", {})
        print(f"trace {Path(r['suspect']).stem}: "
              f"bb_accused={bb.get('accused')} t*={bb.get('t_star')} "
              f"wb_accused={wb.get('accused')}")
    for trials_path in sorted(run_dir.glob("reports/trials_*.json")):
        found = True
        t = json.loads(trials_path.read_text())["summary"]
        print(f"trials {t['strategy']}: n={t['n_trials']} "
              f"false_neg={t['false_negatives']} "
              f"innocent={t['innocent_accusations']} "
              f"wb_exact={t['wb_exact_count']}/{t['n_trials']} "
              f"t*={t['t_star']} mav_mean={t['mav_mean']}")
    if not found:
        print(f"error: nothing to report under {run_dir}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def _run_trials(args, cfg, run_dir: Path) -> int:
    strategy = args.strategy or cfg.fl["strategy"]
    art = _load_artifacts(cfg, run_dir)
    copies = _load_copies(run_dir, strategy)
    part, _ = _corpus(cfg)
    rng = np.random.default_rng(cfg.seeds["trials"])
    ax, ay = _attack_data(cfg, part, rng)
    cells = [ev.TrialCell(c=c, post_attack=_post_attack(cfg, attack),
                          n_trials=n)
             for c, attack, n in cfg.trials["cells"]]
    t0 = time.time()

    def progress(rec):
        if args.verbose:
            print(f"  trial {rec.index}: c={rec.c} {rec.attack} "
                  f"bb={rec.accused_bb} wb={list(rec.accused_wb)} "
                  f"colluders={list(rec.colluders)}", flush=True)

    report = ev.run_collusion_trials(
        copies, triggers=art.triggers, codebook=art.codebook, bias=art.bias,
        basis=art.basis, projection=art.projection, attack_x=ax, attack_y=ay,
        cells=cells, epsilon=art.epsilon, wb_threshold=art.wb_threshold,
        seed=cfg.seeds["trials"], strategy_name=strategy, jobs=args.jobs,
        progress=progress)
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    dump_json(reports_dir / f"trials_{strategy}.json", report.to_json_dict())
    report.write_csv(reports_dir / f"trials_{strategy}.csv")
    _record(run_dir, cfg, f"trials:{strategy}", time.time() - t0,
            report.summary())
    s = report.summary()
    print(f"trials {strategy}: n={s['n_trials']} "
          f"false_neg={s['false_negatives']} "
          f"innocent={s['innocent_accusations']} "
          f"wb_exact={s['wb_exact_count']}/{s['n_trials']} t*={s['t_star']}")
    return EXIT_OK


# ---------------------------------------------------------------- selftest

def cmd_selftest(args) -> int:
    failures = 0

    def check(name: str, ok: bool, detail: str = ""):
        nonlocal failures
        status = "ok  " if ok else "FAIL"
        print(f"{status} - {name}" + (f" ({detail})" if detail else ""))
        failures += 0 if ok else 1

    rng = np.random.default_rng(0)

    z100 = tardos.accusation_threshold(100, 1e-6, 0.038)
    z1000 = tardos.accusation_threshold(1000, 1e-6, 0.038)
    check("accusation threshold closed form",
          abs(z100 - 81.25335) < 1e-3 and abs(z1000 - 191.5183) < 1e-2,
          f"Z_100={z100:.5f} Z_1000={z1000:.4f}")

    bias = tardos.sample_bias_matrix(200, 10, 100.0, 0.038, 1)
    box = (bias.entries >= 0.038 - 1e-12).all() and \
          (bias.entries <= 1 - 9 * 0.038 + 1e-12).all()
    check("bias cutoff box", bool(box))

    p = bias.entries[rng.integers(bias.m)]
    u1 = np.sqrt((1 - p) / p)
    u0 = -np.sqrt(p / (1 - p))
    worst = float(np.max(np.abs(p * u1 + (1 - p) * u0)))
    check("innocent score zero-mean identity", worst < 1e-12,
          f"worst={worst:.2e}")

    basis = whitebox.generate_basis(32, 6, 2)
    gram = basis.vectors.T @ basis.vectors
    check("owner basis orthonormal",
          bool(np.allclose(gram, np.eye(32), atol=1e-10)))

    proj = whitebox.generate_projection(256, 32, 3, dtype=np.float64)
    carriers = [proj.entries @ np.linalg.pinv(proj.entries.T @ proj.entries)
                @ basis.column(k) for k in range(6)]
    merged = np.mean(carriers[:4], axis=0)
    r = whitebox.project(merged, proj, basis.column(0))
    check("collusion law r = 1/sqrt(c)", abs(r - 0.5) < 1e-9, f"r={r:.12f}")

    model = nn.build_model(seed=0)
    check("carrier layer size 73728",
          model.carrier_weights().shape[0] == 73728,
          str(model.carrier_weights().shape[0]))
    probs, _ = nn.forward_predict(model, rng.random((8, 28, 28, 1),
                                                    dtype=np.float32))
    check("softmax rows normalize",
          bool(np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)))

    fired = sum(fedsim.wm_schedule(Strategy.DROPOUT_LIMITED_WM, t, 328)
                for t in range(1640))
    check("limited schedule fires 726 times", fired == 726, str(fired))

    if not args.quick:
        book = tardos.generate_codebook(bias, 20, 5)
        scores = np.zeros(20)
        other = tardos.generate_codebook(bias, 1, 99).labels[0]
        for i in range(bias.m):
            prow = bias.entries[i]
            yi = other[i]
            scores += np.where(book.labels[:, i] == yi,
                               np.sqrt((1 - prow[yi]) / prow[yi]),
                               -np.sqrt(prow[yi] / (1 - prow[yi])))
        zt = tardos.accusation_threshold(bias.m, 1e-6, bias.tau)
        check("innocent scores below threshold", bool(scores.max() < zt),
              f"max={scores.max():.2f} Z={zt:.2f}")

    print(("selftest passed" if failures == 0
           else f"selftest failed ({failures})"))
    return EXIT_OK if failures == 0 else 1


# ------------------------------------------------------------------- main

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fltrace",
        description="Collusion-resistant fingerprinting of federated "
                    "classifier copies: build codes, train, attack, accuse.")
    parser.add_argument("--version", action="version",
                        version=f"fltrace {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", "-c", required=config_required,
                       help="JSON config file")
        p.add_argument("--preset", choices=sorted(cfgmod.PRESETS),
                       help="preset overriding the config's choice")
        p.add_argument("--run-dir", help="run directory (overrides config)")
        p.add_argument("--verbose", "-v", action="store_true")

    p = sub.add_parser("setup", help="generate code/trigger/basis artifacts")
    common(p)
    p.set_defaults(func=cmd_setup)

    p = sub.add_parser("train", help="train a strategy's model copies")
    common(p)
    p.add_argument("--strategy", help="override the config strategy")
    p.add_argument("--owner", type=int,
                   help="owner id for independent modes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="merge colluders and post-process")
    common(p)
    p.add_argument("--strategy", help="which trained copies to attack")
    p.add_argument("--colluders", help="comma-separated owner ids")
    p.add_argument("--c", type=int, help="random collusion size")
    p.add_argument("--post", default="None",
                   choices=["None", "FineTune", "Prune"])
    p.add_argument("--name", help="attack output name")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("trace", help="accuse owners from a suspect model")
    common(p)
    p.add_argument("--suspect", required=True, help="TFNN checkpoint path")
    p.add_argument("--mode", default="both",
                   choices=["blackbox", "whitebox", "both"])
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("report", help="summarize a run directory")
    common(p, config_required=False)
    p.add_argument("--strategy", help="strategy for --run-trials")
    p.add_argument("--run-trials", action="store_true",
                   help="run the config's trial cells before summarizing")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel trial workers")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run fast invariant checks")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (tardos.InvalidParameterError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (MissingArtifactError, ds.MissingFileError, FileNotFoundError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ContainerError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
