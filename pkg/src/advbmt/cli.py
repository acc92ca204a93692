"""Command-line entry point: synth, tokenize, train, generate, evaluate, plot.

Exit codes: 0 success, 2 usage, 3 IO, 4 training divergence or failed
gradient check, 5 checkpoint mismatch, 6 evaluation pairing.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

from advbmt.errors import (
    CheckpointError,
    DivergenceError,
    GradCheckFailure,
    InvalidStateError,
    MissingPairError,
    ParseError,
    ScenarioIoError,
    SchemaError,
)
from advbmt.metrics import is_scenario_file

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_PAIRING = 0, 2, 3, 4, 5, 6

log = logging.getLogger("advbmt")

# model fields that must match a checkpoint; sampling fields may differ
ARCH_FIELDS = (
    "hidden_dim", "num_encoder_layers", "num_decoder_blocks", "num_heads",
    "fourier_bands", "fourier_scale", "token_k", "ffn_mult", "max_polylines",
)


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # model
    hidden_dim: int = 64
    num_encoder_layers: int = 2
    num_decoder_blocks: int = 2
    num_heads: int = 4
    fourier_bands: int = 16
    fourier_scale: float = 1.0
    top_p: float = 0.95
    temperature: float = 1.0
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    token_k: int = 33
    ffn_mult: int = 4
    max_polylines: int = 256
    # training
    steps: int = 2000
    batch_size: int = 8
    forward_fraction: float = 0.4
    log_every: int = 100
    stop_loss: float | None = None
    # generation
    num_modes: int = 6
    mode: str = "replay"
    max_resamples: int = 20
    # run
    data: str | None = None
    out: str | None = None
    seed: int = 0

    def bmt_config(self):
        from advbmt.model import BmtConfig

        d = {f.name: getattr(self, f.name) for f in fields(self)}
        return BmtConfig.from_dict(d)

    def to_json(self) -> str:
        # the output directory is left out so reruns elsewhere stay byte-identical
        d = asdict(self)
        del d["out"]
        return json.dumps(d, indent=1) + "\n"


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    """Config file values, then non-None flag overrides (flags win)."""
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ScenarioIoError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(raw) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in raw.items():
            setattr(cfg, k, v)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    try:
        cfg.bmt_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model configuration: {exc}") from exc
    return cfg


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_manifest(out: Path, command: str, seed: int, files: dict[str, bytes], extra: dict | None = None) -> None:
    from advbmt.scenario import atomic_write_text

    body = {
        "command": command,
        "seed": seed,
        "files": [{"name": name, "sha256": _sha256(data)} for name, data in sorted(files.items())],
    }
    body.update(extra or {})
    atomic_write_text(out / "manifest.json", json.dumps(body, indent=1) + "\n")


def _write_all(out: Path, files: dict[str, bytes]) -> None:
    from advbmt.scenario import atomic_write_bytes

    for name, data in sorted(files.items()):
        atomic_write_bytes(out / name, data)


def _out_dir(path: str | None) -> Path:
    if not path:
        raise UsageError("--out is required")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ScenarioIoError(f"cannot create {out}: {exc}") from exc
    return out


def _scenario_files(path: str | None) -> list[Path]:
    """Scenario JSON files of a file or directory, excluding sidecars and manifests."""
    if not path:
        raise UsageError("--data is required")
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise UsageError(f"data path {p} does not exist")
    files = [f for f in sorted(p.glob("*.json")) if is_scenario_file(f)]
    if not files:
        raise UsageError(f"no scenario files in {p}")
    return files


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from advbmt.scenario import dumps_scenario
    from advbmt.synth import synth_scenario

    import numpy as np

    if args.num is None or args.num < 1:
        raise UsageError("--num must be >= 1")
    cfg = load_run_config(args.config, {"seed": args.seed, "out": args.out})
    out = _out_dir(cfg.out)
    files = {}
    for i in range(args.num):
        sid = f"synth-{cfg.seed}-{i:05d}"
        s = synth_scenario(np.random.default_rng([cfg.seed, i]), sid)
        files[f"{sid}.json"] = dumps_scenario(s).encode()
    _write_all(out, files)
    _write_manifest(out, "synth", cfg.seed, files, {"num": args.num})
    print(f"wrote {len(files)} scenarios to {out}")
    return EXIT_OK


def cmd_tokenize(args) -> int:
    from advbmt.kinematics import Direction, TokenSpace, tokenize_track
    from advbmt.scenario import atomic_write_text, load_scenario
    from advbmt.training import _valid_runs

    cfg = load_run_config(args.config, {"data": args.data, "seed": args.seed, "out": args.out})
    if not cfg.out:
        raise UsageError("--out is required")
    ts = TokenSpace(K=cfg.token_k)
    dirs = [Direction.FORWARD, Direction.REVERSE] if args.direction == "both" else [Direction(args.direction)]
    lines = []
    for path in _scenario_files(cfg.data):
        s = load_scenario(path)
        for a in s.agents:
            runs = [r for r in _valid_runs([st.valid for st in a.states]) if r[1] - r[0] >= 2]
            for d in dirs:
                toks, errs = [], []
                for lo, hi in (runs if d is Direction.FORWARD else runs[::-1]):
                    z, e = tokenize_track(a, d, ts, start=lo, stop=hi)
                    toks += [t.id for t in z]
                    errs += e
                lines.append(json.dumps({
                    "scenario_id": s.scenario_id, "agent_id": a.id, "direction": d.value,
                    "runs": [list(r) for r in runs], "tokens": toks, "contour_errors": errs,
                }))
    out = Path(cfg.out)
    atomic_write_text(out, "\n".join(lines) + ("\n" if lines else ""))
    print(f"wrote {len(lines)} token sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from advbmt.checkpoint import checkpoint_bytes, training_log_csv
    from advbmt.scenario import load_scenario
    from advbmt.training import TrainSettings, grad_check, train

    cfg = load_run_config(args.config, {
        "data": args.data, "out": args.out, "seed": args.seed, "steps": args.steps,
        "batch_size": args.batch_size, "learning_rate": args.lr, "stop_loss": args.stop_loss,
        "log_every": args.log_every, "forward_fraction": args.forward_fraction,
    })
    if cfg.steps < 1:
        raise UsageError("--steps must be >= 1")
    scenarios = [load_scenario(p) for p in _scenario_files(cfg.data)]
    out = _out_dir(cfg.out)
    if args.grad_check:
        rep = grad_check(seed=cfg.seed)
        print(f"grad check: {rep.num_checked} parameters, max relative error {rep.max_rel_error:.2e}")
    bmt = cfg.bmt_config()
    bmt = type(bmt).from_dict({**bmt.to_dict(), "seed": cfg.seed})
    settings = TrainSettings(
        steps=cfg.steps, batch_size=cfg.batch_size, forward_fraction=cfg.forward_fraction,
        log_every=cfg.log_every, stop_loss=cfg.stop_loss,
    )
    result = train(scenarios, bmt, settings)
    files = {
        "model.ckpt": checkpoint_bytes(result.model),
        "train_log.csv": training_log_csv(result.log).encode(),
        "run_config.json": cfg.to_json().encode(),
    }
    _write_all(out, files)
    _write_manifest(out, "train", cfg.seed, files, {"steps": result.steps, "num_scenarios": len(scenarios)})
    d = result.final_diag
    print(f"final loss {result.final_loss:.6f} perplexity {d.perplexity:.4f} steps {result.steps}")
    return EXIT_OK


_WORKER_MODEL = None


def _init_worker(ckpt: str, cfg_json: str) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = _load_generation_model(ckpt, RunConfig(**json.loads(cfg_json)), explicit=set())


def _load_generation_model(ckpt: str, cfg: RunConfig, explicit: set[str]):
    """Checkpoint model; explicitly configured architecture fields must match it."""
    from advbmt.checkpoint import load_checkpoint
    from advbmt.model import BmtConfig, BmtModel

    model = load_checkpoint(ckpt)
    saved = model.cfg.to_dict()
    bad = [k for k in ARCH_FIELDS if k in explicit and getattr(cfg, k) != saved[k]]
    if bad:
        raise CheckpointError(f"checkpoint/config mismatch in {', '.join(bad)}")
    sampling = {"top_p": cfg.top_p, "temperature": cfg.temperature}
    new_cfg = BmtConfig.from_dict({**saved, **sampling})
    return BmtModel(new_cfg, model.params, model.buffers)


def _generate_one(task: tuple[int, str, str, int, int, int], model=None) -> tuple[dict[str, bytes], list]:
    from advbmt.adversary import GenerationMode, dumps_sidecar, ego_adv_contact, generate_batch
    from advbmt.scenario import dumps_scenario, load_scenario

    index, path, mode, num_modes, max_resamples, seed = task
    model = model or _WORKER_MODEL
    s = load_scenario(path)
    results = generate_batch(s, num_modes, GenerationMode(mode), model, [seed, index], max_resamples)
    files, stats = {}, []
    stem = Path(path).stem
    for k, r in enumerate(results):
        name = f"{stem}__mode{k}"
        files[f"{name}.json"] = dumps_scenario(r.scenario).encode()
        files[f"{name}.sidecar.json"] = dumps_sidecar(r).encode()
        stats.append((r.accepted, ego_adv_contact(r)))
    return files, stats


def cmd_generate(args) -> int:
    overrides = {
        "data": args.data, "out": args.out, "seed": args.seed, "num_modes": args.num_modes,
        "mode": args.mode, "max_resamples": args.max_resamples, "top_p": args.top_p,
        "temperature": args.temperature,
    }
    cfg = load_run_config(args.config, overrides)
    if cfg.num_modes < 1:
        raise UsageError("--num-modes must be >= 1")
    if cfg.max_resamples < 0:
        raise UsageError("--max-resamples must be >= 0")
    if cfg.mode not in ("replay", "closed_loop_reverse", "forward_refine"):
        raise UsageError(f"unknown mode {cfg.mode!r}")
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    explicit = set()
    if args.config:
        explicit = set(json.loads(Path(args.config).read_text()))
    model = _load_generation_model(args.checkpoint, cfg, explicit)
    paths = _scenario_files(cfg.data)
    out = _out_dir(cfg.out)
    tasks = [(i, str(p), cfg.mode, cfg.num_modes, cfg.max_resamples, cfg.seed) for i, p in enumerate(paths)]
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker,
                                 initargs=(args.checkpoint, cfg.to_json())) as pool:
            outputs = list(pool.map(_generate_one, tasks))
    else:
        outputs = [_generate_one(t, model) for t in tasks]
    files, stats = {}, []
    for f, st in outputs:
        files.update(f)
        stats += st
    files["run_config.json"] = cfg.to_json().encode()
    _write_all(out, files)
    _write_manifest(out, "generate", cfg.seed, files, {"mode": cfg.mode, "num_modes": cfg.num_modes})
    n = len(stats)
    accept = sum(a for a, _ in stats) / n
    attack = sum(c for _, c in stats) / n
    print(f"generated {n} candidates from {len(paths)} scenarios: accept rate {accept:.3f} attack success {attack:.3f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from advbmt.metrics import evaluate
    from advbmt.plotting import report_svg

    cfg = load_run_config(args.config, {"out": args.out, "seed": args.seed})
    for p in (args.pred, args.gt):
        if not p or not Path(p).is_dir():
            raise UsageError(f"directory {p} does not exist")
    out = _out_dir(cfg.out)
    report = evaluate(args.pred, args.gt, seed=cfg.seed)
    files = {"report.csv": report.to_csv().encode(), "report.svg": report_svg(report)}
    _write_all(out, files)
    _write_manifest(out, "evaluate", cfg.seed, files)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_plot(args) -> int:
    from advbmt.plotting import scenario_svg, write_svg
    from advbmt.scenario import load_scenario

    if not args.out:
        raise UsageError("--out is required")
    if args.every < 1:
        raise UsageError("--every must be >= 1")
    path = Path(args.scenario)
    s = load_scenario(path)
    adv_id = args.adv_id
    if adv_id is None:
        sidecar = path.with_name(path.stem + ".sidecar.json")
        if sidecar.is_file() and s.agents:
            adv_id = s.agents[-1].id
        elif s.agent_by_id("adv") is not None:
            adv_id = "adv"
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        raise ScenarioIoError(f"output directory {out.parent} does not exist")
    write_svg(scenario_svg(s, adv_id, args.every), out)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--config", default=None, help="JSON run config; flags override its values")
    common.add_argument("--out", default=None, help="output directory (file for tokenize and plot)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (generate)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="advbmt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic scenarios")
    s.add_argument("--num", type=int, required=True, help="number of scenarios (>= 1)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("tokenize", parents=[common], help="dump motion tokens as JSONL")
    s.add_argument("--data", required=False, help="scenario file or directory")
    s.add_argument("--direction", choices=("forward", "reverse", "both"), default="both")
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("train", parents=[common], help="train a model on a scenario directory")
    s.add_argument("--data", help="scenario file or directory")
    s.add_argument("--steps", type=int, help="optimizer steps (default 2000)")
    s.add_argument("--batch-size", type=int, help="scenarios per batch (default 8)")
    s.add_argument("--lr", type=float, help="peak learning rate (default 3e-4)")
    s.add_argument("--stop-loss", type=float, help="stop once the full-data loss reaches this value")
    s.add_argument("--log-every", type=int, help="evaluation/log interval in steps (default 100)")
    s.add_argument("--forward-fraction", type=float, help="share of steps in the forward-only phase (default 0.4)")
    s.add_argument("--grad-check", action="store_true", help="run the finite-difference gradient check first")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", parents=[common], help="insert adversarial agents")
    s.add_argument("--checkpoint", help="model checkpoint file")
    s.add_argument("--data", help="scenario file or directory")
    s.add_argument("--num-modes", type=int, help="candidates per scenario (default 6)")
    s.add_argument("--mode", choices=("replay", "closed_loop_reverse", "forward_refine"), help="traffic handling (default replay)")
    s.add_argument("--max-resamples", type=int, help="resamples per rejected slot (default 20)")
    s.add_argument("--top-p", type=float, help="nucleus mass (default 0.95; <= 0 is greedy)")
    s.add_argument("--temperature", type=float, help="sampling temperature (default 1.0)")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="compare generated and source corpora")
    s.add_argument("--pred", required=True, help="directory of generated scenarios")
    s.add_argument("--gt", required=True, help="directory of source scenarios")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", parents=[common], help="render a scenario as SVG")
    s.add_argument("--scenario", required=True, help="scenario JSON file")
    s.add_argument("--every", type=int, default=3, help="draw every n-th step (default 3)")
    s.add_argument("--adv-id", default=None, help="agent drawn as the adversary (auto-detected)")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, GradCheckFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except MissingPairError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PAIRING
    except (ScenarioIoError, ParseError, SchemaError, InvalidStateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
