"""Command line front end: dataset generation, tuning, evaluation, sweeps.

Configuration is a flat ``key = value`` file plus per-key override flags;
every failure class maps to its own process exit code so scripts can
branch on what went wrong without parsing stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import Backbone, BackboneConfig, PromptVector
from .dataset import Dataset, DatasetSpec, generate, load, save, split_base_new
from .errors import (ConfigError, DatasetError, DegenerateInputError,
                     EvalError, MaoError)
from .evaluator import (RunMetrics, SWEEP_AXES, ablate_sweep, base_to_new_eval,
                        emit_report, report_csv_text, spearman_rho,
                        sweep_csv_text)
from .figures import (save_loss_curve, save_metric_bars, save_pca_scatter,
                      save_sweep_trend)
from .hardneg import (auto_shrink, build_index, expand_batch, pca_snapshot,
                      semantic_density, uniform_batch)
from .numerics import Rng
from .trainer import (CostMeter, RunState, TuneConfig, cost_meter,
                      parse_prompt_tensor, run_two_step, write_run_dir)

#: Environment variable consulted for the seed when neither the config
#: file nor a flag sets one.
SEED_ENV_VAR = "MAO_SEED"

#: Number of seeded batches the diagnostics command samples per sampler.
DIAG_BATCHES = 20


@dataclass(frozen=True)
class _Key:
    name: str
    kind: str  # int | float | bool | str
    default: object
    help: str


#: Every recognized configuration key, in documentation order.  The file
#: parser, the flag generator, and the snapshot writer all derive from
#: this single table, so they cannot drift apart.
SCHEMA: tuple[_Key, ...] = (
    _Key("seed", "int", 7, "master seed for data, init, and tuning"),
    _Key("out", "str", "runs", "output root directory"),
    _Key("dataset", "str", "", "dataset file path (default: <out>/dataset.txt)"),
    _Key("n_super", "int", 8, "superclasses in the synthetic benchmark"),
    _Key("classes_per_super", "int", 4, "classes per superclass"),
    _Key("d_img", "int", 32, "image feature width"),
    _Key("d_s", "int", 16, "sampler embedding width"),
    _Key("sigma_img", "float", 0.15, "image noise level"),
    _Key("sigma_sem", "float", 0.05, "sampler embedding noise level"),
    _Key("n_train", "int", 32, "training images per class"),
    _Key("n_test", "int", 32, "test images per class"),
    _Key("variant", "str", "text", "encoder variant: text or joint"),
    _Key("prompt_rows", "int", 4, "learned context rows in the prompt"),
    _Key("d_token", "int", 32, "token width"),
    _Key("d", "int", 32, "shared embedding width"),
    _Key("tau", "float", 0.01, "softmax temperature for class scores"),
    _Key("mode", "str", "mao_full",
         "tuning mode: mao_full, mao_base_only, mao_new_only, backbone, backbone_2x"),
    _Key("epochs", "int", 20, "total tuning epochs (two-step modes split them)"),
    _Key("lr", "float", 0.0035, "SGD learning rate"),
    _Key("b", "int", 4, "anchor images per batch"),
    _Key("topk", "int", 8, "similar classes drawn per anchor"),
    _Key("shots", "int", 16, "few-shot training images per base class"),
    _Key("new_ar", "bool", True, "restrict new-phase candidates to new classes"),
    _Key("labeler", "str", "foundation", "pseudo-labeler: foundation or tuned"),
    _Key("axis", "str", "topK", "ablation sweep axis: topK or shots"),
    _Key("values", "str", "1,2,4,8", "comma-separated sweep values"),
)
_SCHEMA_BY_NAME = {k.name: k for k in SCHEMA}


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration: one field per schema key."""

    seed: int = 7
    out: str = "runs"
    dataset: str = ""
    n_super: int = 8
    classes_per_super: int = 4
    d_img: int = 32
    d_s: int = 16
    sigma_img: float = 0.15
    sigma_sem: float = 0.05
    n_train: int = 32
    n_test: int = 32
    variant: str = "text"
    prompt_rows: int = 4
    d_token: int = 32
    d: int = 32
    tau: float = 0.01
    mode: str = "mao_full"
    epochs: int = 20
    lr: float = 0.0035
    b: int = 4
    topk: int = 8
    shots: int = 16
    new_ar: bool = True
    labeler: str = "foundation"
    axis: str = "topK"
    values: str = "1,2,4,8"

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(n_super=self.n_super,
                           classes_per_super=self.classes_per_super,
                           d_img=self.d_img, d_s=self.d_s,
                           sigma_img=self.sigma_img, sigma_sem=self.sigma_sem,
                           n_train_per_class=self.n_train,
                           n_test_per_class=self.n_test, seed=self.seed)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(variant=self.variant, L=self.prompt_rows,
                              d_token=self.d_token, d=self.d, d_img=self.d_img,
                              tau=self.tau, seed=self.seed)

    def tune_config(self) -> TuneConfig:
        return TuneConfig(epochs_total=self.epochs, lr=self.lr, b=self.b,
                          top_k=self.topk, shots=self.shots, mode=self.mode,
                          new_ar=self.new_ar, labeler_mode=self.labeler,
                          seed=self.seed)

    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else Path(self.out) / "dataset.txt"

    def sweep_values(self) -> list[int]:
        parts = [p.strip() for p in self.values.split(",") if p.strip()]
        if not parts:
            raise ConfigError("values must list at least one integer")
        try:
            return [int(p) for p in parts]
        except ValueError as exc:
            raise ConfigError(f"values must be comma-separated integers, "
                              f"got {self.values!r}") from exc

    def snapshot_text(self) -> str:
        lines = ["# resolved configuration, one `key = value` per line"]
        for key in SCHEMA:
            lines.append(f"{key.name} = {_format_value(getattr(self, key.name))}")
        return "\n".join(lines) + "\n"


assert tuple(f.name for f in fields(RunConfig)) == tuple(k.name for k in SCHEMA)

_TRUE_WORDS = {"true", "yes", "on", "1"}
_FALSE_WORDS = {"false", "no", "off", "0"}


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: _Key, raw: str, where: str) -> object:
    raw = raw.strip()
    try:
        if key.kind == "int":
            return int(raw)
        if key.kind == "float":
            return float(raw)
        if key.kind == "bool":
            low = raw.lower()
            if low in _TRUE_WORDS:
                return True
            if low in _FALSE_WORDS:
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"key {key.name!r} expects {key.kind}, "
                          f"got {raw!r} ({where})") from exc


def parse_config_entries(text: str) -> list[tuple[int, str, str]]:
    """Split config text into ``(line_number, key, raw_value)`` entries.

    ``#`` starts a comment anywhere on a line; blank lines are skipped.
    Malformed lines and unknown keys are rejected with their line number.
    """
    entries = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected `key = value` on line {lineno}, "
                              f"got {stripped!r}")
        name, raw = stripped.split("=", 1)
        name = name.strip()
        if name not in _SCHEMA_BY_NAME:
            raise ConfigError(f"unknown key {name!r} (line {lineno})")
        entries.append((lineno, name, raw.strip()))
    return entries


def resolve_config(config_path: str | None,
                   overrides: dict[str, str] | None = None) -> RunConfig:
    """Merge defaults, the seed environment variable, a config file, and
    flag overrides into one :class:`RunConfig`.

    Precedence, lowest to highest: schema defaults, ``MAO_SEED``, file
    entries (later lines win), command line flags.
    """
    values: dict[str, object] = {k.name: k.default for k in SCHEMA}
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        values["seed"] = _coerce(_SCHEMA_BY_NAME["seed"], env_seed,
                                 f"environment variable {SEED_ENV_VAR}")
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, name, raw in parse_config_entries(path.read_text(encoding="utf-8")):
            values[name] = _coerce(_SCHEMA_BY_NAME[name], raw, f"line {lineno}")
    for name, raw in (overrides or {}).items():
        key = _SCHEMA_BY_NAME[name]
        values[name] = _coerce(key, raw, f"flag --{name.replace('_', '-')}")
    cfg = RunConfig(**values)
    # fail fast on bad combinations, before any command touches disk
    cfg.dataset_spec()
    cfg.backbone_config()
    cfg.tune_config()
    return cfg


def config_from_snapshot(text: str) -> RunConfig:
    """Rebuild a :class:`RunConfig` from snapshot text alone (no
    environment, no flags)."""
    values: dict[str, object] = {k.name: k.default for k in SCHEMA}
    for lineno, name, raw in parse_config_entries(text):
        values[name] = _coerce(_SCHEMA_BY_NAME[name], raw, f"line {lineno}")
    return RunConfig(**values)


# --------------------------------------------------------------------------
# shared command plumbing

def _unique_dir(base: Path) -> Path:
    """First of ``base``, ``base-2``, ``base-3``, ... that does not exist."""
    if not base.exists():
        return base
    n = 2
    while (base.parent / f"{base.name}-{n}").exists():
        n += 1
    return base.parent / f"{base.name}-{n}"


def _load_dataset(cfg: RunConfig) -> Dataset:
    path = cfg.dataset_path()
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path} (run `mao gen` first)")
    return load(path)


def _restore_run(run_dir: Path, ds: Dataset) -> RunState:
    """Rebuild a finished run's state from its on-disk artifacts."""
    run_dir = Path(run_dir)
    for name in ("config.snapshot", "final_prompt.tensor", "cost.json"):
        if not (run_dir / name).is_file():
            raise EvalError(f"run directory {run_dir} is missing {name}")
    cfg = config_from_snapshot((run_dir / "config.snapshot").read_text(encoding="utf-8"))
    backbone = Backbone(cfg.backbone_config(), ds)
    arrays = parse_prompt_tensor((run_dir / "final_prompt.tensor").read_text(encoding="utf-8"))
    backbone.prompt = PromptVector.from_rows(backbone.cfg, arrays["tokens"])
    if "visual_prefix" in arrays:
        if backbone.visual is None:
            raise EvalError(f"run directory {run_dir} stores a visual prefix "
                            f"but variant {cfg.variant!r} has none")
        backbone.visual.prefix.data[:] = arrays["visual_prefix"]
    cost = CostMeter(**json.loads((run_dir / "cost.json").read_text(encoding="utf-8")))
    return RunState(config=cfg.tune_config(), backbone=backbone, cost=cost)


# --------------------------------------------------------------------------
# subcommands

def _cmd_gen(cfg: RunConfig) -> int:
    ds = split_base_new(generate(cfg.dataset_spec()))
    path = cfg.dataset_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    save(ds, path)
    print(f"wrote {path}")
    print(f"classes: {ds.n_classes} "
          f"({len(ds.base_classes())} base / {len(ds.new_classes())} new)")
    return 0


def _cmd_tune(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    backbone = Backbone(cfg.backbone_config(), ds)
    state = run_two_step(cfg.tune_config(), ds, backbone)
    cost_meter(state, ds)
    run_dir = _unique_dir(Path(cfg.out) / f"{cfg.mode}-seed{cfg.seed}")
    write_run_dir(state, run_dir, cfg.snapshot_text())
    save_loss_curve(state.metrics, run_dir / "loss_curve.svg")
    for line in state.events:
        print(line)
    print(f"wrote {run_dir}")
    print(f"epochs: {state.epoch}  final loss: {state.metrics[-1].loss:.6f}")
    return 0


def _cmd_eval(cfg: RunConfig, run_dirs: list[str]) -> int:
    ds = _load_dataset(cfg)
    rows: list[RunMetrics] = []
    for run in run_dirs:
        state = _restore_run(Path(run), ds)
        rows.append(base_to_new_eval(state, ds))
    out_dir = _unique_dir(Path(cfg.out) / "report")
    csv_path, json_path = emit_report(rows, out_dir)
    save_metric_bars(rows, out_dir / "report_bars.svg")
    print(report_csv_text(rows), end="")
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    print(f"wrote {out_dir / 'report_bars.svg'}")
    return 0


def _cmd_ablate(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    rows = ablate_sweep(cfg.axis, cfg.sweep_values(), cfg.tune_config(), ds,
                        cfg.backbone_config())
    out_dir = _unique_dir(Path(cfg.out) / f"ablate-{cfg.axis}")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.csv").write_text(sweep_csv_text(cfg.axis, rows),
                                       encoding="utf-8")
    save_sweep_trend(cfg.axis, rows, out_dir / "sweep_trend.svg")
    print(sweep_csv_text(cfg.axis, rows), end="")
    if len(rows) >= 2:
        rho = spearman_rho([r.value for r in rows], [r.metric for r in rows])
        print(f"spearman(value, metric) = {rho:.3f}")
    print(f"wrote {out_dir / 'sweep.csv'}")
    print(f"wrote {out_dir / 'sweep_trend.svg'}")
    return 0


def _cmd_diag(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    index = build_index(ds)
    all_pairs = [(im.image_id, cid) for cid in ds.base_classes()
                 for im in ds.images_of(cid, "train")]
    b_eff, k_eff, notes = auto_shrink(cfg.b, cfg.topk, len(ds.base_classes()))
    for line in notes:
        print(line)
    rng = Rng(cfg.seed).substream("diag")
    density_rows = []
    snap: dict[str, object] = {}
    for i in range(DIAG_BATCHES):
        brng = rng.substream(f"batch-{i}")
        order = brng.substream("anchors").permutation(len(all_pairs))
        anchors = [all_pairs[j] for j in order[:b_eff]]
        hard = expand_batch(index, ds, anchors, k_eff, brng.substream("expand"))
        uni = uniform_batch(all_pairs, b_eff * k_eff, brng.substream("uniform"))
        density_rows.append(("hard", i, semantic_density(hard, ds)))
        density_rows.append(("uniform", i, semantic_density(uni, ds)))
        # earliest batch pair wide enough for the 2-d projection
        if not snap and min(len(set(hard.class_ids())),
                            len(set(uni.class_ids()))) >= 3:
            snap = {"hard": hard, "uniform": uni}
    if not snap:
        raise DegenerateInputError(
            f"no batch covered three distinct classes in {DIAG_BATCHES} draws")
    hard_rows = pca_snapshot(snap["hard"], ds)
    uniform_rows = pca_snapshot(snap["uniform"], ds)
    out_dir = _unique_dir(Path(cfg.out) / "diag")
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["kind,batch,density"]
    lines += [f"{kind},{i},{d!r}" for kind, i, d in density_rows]
    (out_dir / "density.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    pca_lines = ["kind,class_id,x,y"]
    pca_lines += [f"hard,{cid},{x!r},{y!r}" for cid, x, y in hard_rows]
    pca_lines += [f"uniform,{cid},{x!r},{y!r}" for cid, x, y in uniform_rows]
    (out_dir / "pca.csv").write_text("\n".join(pca_lines) + "\n", encoding="utf-8")
    save_pca_scatter(hard_rows, uniform_rows, out_dir / "pca.svg")
    mean_hard = sum(d for k, _, d in density_rows if k == "hard") / DIAG_BATCHES
    mean_uni = sum(d for k, _, d in density_rows if k == "uniform") / DIAG_BATCHES
    print(f"mean density over {DIAG_BATCHES} batches: "
          f"hard {mean_hard:.4f}  uniform {mean_uni:.4f}")
    print(f"wrote {out_dir / 'density.csv'}")
    print(f"wrote {out_dir / 'pca.csv'}")
    print(f"wrote {out_dir / 'pca.svg'}")
    return 0


# --------------------------------------------------------------------------
# argument parsing

_EXIT_DOC = """\
exit codes:
  0  success
  2  usage error (unknown subcommand or malformed flags)
  3  configuration error (unknown key, bad value, bad combination)
  4  dataset error (bad spec, missing or malformed dataset file)
  5  vocabulary or candidate-set error
  6  batch constraint violation
  7  degenerate input or numerics failure
  8  training failure
  9  evaluation or report failure
"""

_COMMANDS = (
    ("gen", "generate the synthetic dataset file"),
    ("tune", "tune a prompt and write a run directory"),
    ("eval", "score finished runs and write report files plus figures"),
    ("ablate", "sweep one hyperparameter and plot the trend"),
    ("diag", "compare hard-negative and uniform batch statistics"),
)


def _key_doc() -> str:
    lines = ["configuration keys (file lines `key = value`, or flags):"]
    for key in SCHEMA:
        flag = "--" + key.name.replace("_", "-")
        lines.append(f"  {flag:<21} {key.kind:<6} default {_format_value(key.default):<10} {key.help}")
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mao",
        description="Prompt tuning for a frozen dual encoder on synthetic data.",
        epilog=_EXIT_DOC,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="{gen,tune,eval,ablate,diag}")
    for name, help_text in _COMMANDS:
        p = sub.add_parser(name, help=help_text, description=help_text,
                           epilog=_key_doc() + "\n" + _EXIT_DOC,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", metavar="FILE",
                       help="configuration file; `#` starts a comment")
        if name == "eval":
            p.add_argument("--run", action="append", required=True,
                           metavar="DIR", help="run directory to score "
                           "(repeat the flag for a multi-row report)")
        for key in SCHEMA:
            p.add_argument("--" + key.name.replace("_", "-"),
                           dest=f"opt_{key.name}", metavar=key.kind.upper(),
                           help=f"override `{key.name}` ({key.help})")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    overrides = {key.name: raw for key in SCHEMA
                 if (raw := getattr(args, f"opt_{key.name}")) is not None}
    try:
        cfg = resolve_config(args.config, overrides)
        if args.command == "gen":
            return _cmd_gen(cfg)
        if args.command == "tune":
            return _cmd_tune(cfg)
        if args.command == "eval":
            return _cmd_eval(cfg, args.run)
        if args.command == "ablate":
            return _cmd_ablate(cfg)
        return _cmd_diag(cfg)
    except MaoError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
