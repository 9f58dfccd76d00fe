"""Command-line driver: ``udll <stage> [options]``.

Each stage reads and writes files in a run directory (``--out``), so the
pipeline can be resumed from any stage. Settings come from built-in
defaults, then an optional ``preset``, then a flat ``key = value`` config
file, then command-line flags.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence, 5 eigensolver non-convergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import VERSION as DATASET_VERSION
from .datasets import (
    ImageDataset,
    downsample,
    load_binary,
    load_image_dir,
    load_labels,
    save_binary,
    save_labels,
    synth_blobs,
)
from .exceptions import ConvergenceError, DataFormatError, DivergenceError, ShapeError, UDLLError
from .metrics import best_mapping, clustering_accuracy
from .model import (
    CKPT_VERSION,
    BENCHMARK_CONFIGS,
    HyperParams,
    NetworkConfig,
    attach_self_expressive,
    encode,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .priorgraph import build_prior_graph, check_prior_graph, load_graph, save_graph
from .spectral import spectral_cluster

logger = logging.getLogger("udll")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_NOCONVERGE = 0, 2, 3, 4, 5

CONFIG_FILE = "config.txt"
PRETRAIN_CKPT = "pretrain.ckpt"
PRETRAIN_CSV = "pretrain_loss.csv"
GRAPH_FILE = "graph.txt"
FINETUNE_CKPT = "finetune.ckpt"
FINETUNE_CSV = "finetune_loss.csv"
W_FILE = "W.npy"
LABELS_FILE = "labels.txt"
REPORT_FILE = "report.txt"
EMBEDDING_CSV = "embedding.csv"

FORMAT_VERSIONS = {"checkpoint_version": CKPT_VERSION, "dataset_version": DATASET_VERSION, "graph_format": "UDLL-GRAPH"}


class ConfigError(UDLLError, ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    """Fully resolved settings of one run. ``None`` means "derive from the data"."""

    dataset: str | None = None
    format: str = "udlb"
    resize: tuple[int, int] | None = None
    layers: tuple[tuple[int, int], ...] = ((15, 3),)
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    k: int = 3
    clusters: int | None = None
    epochs_pretrain: int = 200
    epochs_finetune: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    top_q: int = 0
    eigen_solver: str = "jacobi"
    n_init: int = 10
    zero_diagonal: bool = False
    w_init: str = "noise"
    preset: str | None = None
    out: Path = field(default=Path("run"), metadata={"echo": False})

    def hyper(self):
        return HyperParams(
            alpha=self.alpha, beta=self.beta, gamma=self.gamma, k=self.k,
            epochs_pretrain=self.epochs_pretrain, epochs_finetune=self.epochs_finetune,
            learning_rate=self.learning_rate, seed=self.seed, zero_diagonal=self.zero_diagonal,
        )

    def network(self, input_hw):
        return NetworkConfig(self.layers, (*input_hw, 1))

    def echo(self):
        lines = [f"# udll {__version__} resolved configuration"]
        for f in fields(self):
            if f.metadata.get("echo", True):
                lines.append(f"{f.name} = {_format_value(f.name, getattr(self, f.name))}")
        lines += [f"{k} = {v}" for k, v in FORMAT_VERSIONS.items()]
        return "\n".join(lines) + "\n"


def _format_value(name, value):
    if value is None:
        return "none"
    if name == "layers":
        return ",".join(f"{c}x{s}" for c, s in value)
    if name == "resize":
        return f"{value[0]}x{value[1]}"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _pair(text):
    a, sep, b = text.lower().partition("x")
    if not sep:
        raise ValueError(f"expected AxB, got {text!r}")
    return int(a), int(b)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    return lambda text: None if text.strip().lower() in ("", "none") else conv(text)


PARSERS = {
    "dataset": _optional(str),
    "format": str,
    "resize": _optional(_pair),
    "layers": lambda t: tuple(_pair(p) for p in t.split(",") if p.strip()),
    "alpha": float,
    "beta": float,
    "gamma": float,
    "k": int,
    "clusters": _optional(int),
    "epochs_pretrain": int,
    "epochs_finetune": int,
    "learning_rate": float,
    "seed": int,
    "top_q": int,
    "eigen_solver": str,
    "n_init": int,
    "zero_diagonal": _bool,
    "w_init": str,
    "preset": _optional(str),
}
# written by the echo; accepted so an echoed config can be fed back in
IGNORED_KEYS = set(FORMAT_VERSIONS)


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if key in IGNORED_KEYS:
            continue
        if key not in PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse(key, value, f"{path}:{lineno}")
    return values


def _parse(key, value, where):
    try:
        return PARSERS[key](value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc


def resolve_config(file_values, flag_values, out):
    merged = {**file_values, **flag_values}
    base = {}
    preset = merged.get("preset")
    if preset is not None:
        if preset not in BENCHMARK_CONFIGS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(BENCHMARK_CONFIGS)}")
        p = BENCHMARK_CONFIGS[preset]
        base = dict(layers=p["config"].layers, alpha=p["alpha"], beta=p["beta"], gamma=p["gamma"], k=p["k"],
                    epochs_finetune=p["epochs"], resize=p["config"].input_shape[:2])
    cfg = RunConfig(**{**base, **merged, "out": Path(out)})
    if cfg.format not in ("udlb", "pgm", "synth"):
        raise ConfigError(f"format must be udlb, pgm or synth, got {cfg.format!r}")
    if cfg.eigen_solver not in ("jacobi", "lapack"):
        raise ConfigError(f"eigen_solver must be jacobi or lapack, got {cfg.eigen_solver!r}")
    if cfg.w_init not in ("noise", "identity"):
        raise ConfigError(f"w_init must be noise or identity, got {cfg.w_init!r}")
    if cfg.k < 1:
        raise ConfigError("k must be >= 1")
    try:
        NetworkConfig(cfg.layers)
        cfg.hyper()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# -- data -------------------------------------------------------------------


def _synth_args(spec):
    conv = {"classes": int, "per_class": int, "h": int, "w": int, "noise_sigma": float, "seed": int}
    kw = {}
    for part in filter(None, (spec or "").split(",")):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in conv:
            raise ConfigError(f"unknown synth option {key!r}; expected {sorted(conv)}")
        kw[key] = conv[key](value)
    return kw


def load_dataset(cfg: RunConfig) -> ImageDataset:
    if cfg.format == "synth":
        ds = synth_blobs(**_synth_args(cfg.dataset))
    elif cfg.dataset is None:
        raise ConfigError("no dataset given (use --dataset or 'dataset = ...')")
    elif not Path(cfg.dataset).exists():
        raise DataFormatError(f"dataset {cfg.dataset} does not exist")
    elif cfg.format == "pgm":
        return load_image_dir(cfg.dataset, target_hw=cfg.resize)
    else:
        ds = load_binary(cfg.dataset)
    if cfg.resize is not None and tuple(ds.shape[:2]) != tuple(cfg.resize):
        images = np.stack([downsample(img, *cfg.resize) for img in ds.images])
        ds = ImageDataset(images, ds.labels, ds.class_count, ds.name, {**ds.provenance, "downsample": list(cfg.resize)})
    if ds.n == 0:
        raise DataFormatError("dataset is empty")
    return ds


# -- artifacts --------------------------------------------------------------


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, (int, np.integer)) else repr(float(v)) for v in row])


def _load_state(path, cfg, ds):
    try:
        state, echo = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint {path} not found; run the earlier stage first") from exc
    expected = cfg.network(ds.shape[:2])
    if state.config != expected:
        raise ConfigError(
            f"checkpoint {path} was trained with {state.config.to_dict()} but the config describes {expected.to_dict()}"
        )
    return state


def _write_echo(cfg):
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / CONFIG_FILE).write_text(cfg.echo())


# -- stages -----------------------------------------------------------------


def cmd_pretrain(cfg: RunConfig, ds=None):
    ds = load_dataset(cfg) if ds is None else ds
    _write_echo(cfg)
    state = pretrain(ds.images, cfg.network(ds.shape[:2]), cfg.hyper())
    path = cfg.out / PRETRAIN_CKPT
    save_checkpoint(state, path, extra={"stage": "pretrain"})
    _write_csv(cfg.out / PRETRAIN_CSV, ["epoch", "reconstruction"],
               ((i, t.reconstruction) for i, t in enumerate(state.history, 1)))
    logger.info("pretrain: %d epochs, final reconstruction %.6g", state.epoch,
                state.history[-1].reconstruction if state.history else float("nan"))
    return path


def cmd_graph(cfg: RunConfig, checkpoint=None, ds=None):
    ds = load_dataset(cfg) if ds is None else ds
    _write_echo(cfg)
    state = _load_state(Path(checkpoint or cfg.out / PRETRAIN_CKPT), cfg, ds)
    if cfg.k >= ds.n:
        raise ConfigError(f"k={cfg.k} needs more than {cfg.k} samples, dataset has {ds.n}")
    graph = build_prior_graph(encode(ds.images, state), cfg.k)
    path = cfg.out / GRAPH_FILE
    save_graph(graph, path)
    check_prior_graph(load_graph(path))
    logger.info("graph: %d nodes, k=%d, %d degenerate columns", graph.n, graph.k, int(np.count_nonzero(graph.degenerate)))
    return path


def cmd_finetune(cfg: RunConfig, checkpoint=None, graph=None, ds=None):
    ds = load_dataset(cfg) if ds is None else ds
    _write_echo(cfg)
    state = _load_state(Path(checkpoint or cfg.out / PRETRAIN_CKPT), cfg, ds)
    graph_path = Path(graph or cfg.out / GRAPH_FILE)
    if not graph_path.exists():
        raise ConfigError(f"graph {graph_path} not found; run 'udll graph' first")
    A = load_graph(graph_path)
    if A.n != ds.n:
        raise ConfigError(f"graph has {A.n} nodes but the dataset has {ds.n} samples")
    state = attach_self_expressive(state, ds.n, seed=cfg.seed, init=cfg.w_init)
    state = finetune(ds.images, A, state, cfg.hyper())
    save_checkpoint(state, cfg.out / FINETUNE_CKPT, extra={"stage": "finetune"})
    np.save(cfg.out / W_FILE, state.W)
    _write_csv(
        cfg.out / FINETUNE_CSV,
        ["epoch", "reconstruction", "affinity", "regularizer", "locality", "total"],
        ((i, t.reconstruction, t.affinity, t.regularizer, t.locality, t.total) for i, t in enumerate(state.history, 1)),
    )
    logger.info("finetune: %d epochs, final total %.6g", state.epoch,
                state.history[-1].total if state.history else float("nan"))
    return cfg.out / W_FILE


def cmd_cluster(cfg: RunConfig, w_path=None, ds=None):
    w_path = Path(w_path or cfg.out / W_FILE)
    if not w_path.exists():
        raise ConfigError(f"W matrix {w_path} not found; run 'udll finetune' first")
    W = np.load(w_path)
    clusters = cfg.clusters
    if clusters is None:
        ds = load_dataset(cfg) if ds is None else ds
        clusters = ds.class_count
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DataFormatError(f"{w_path}: W must be square, got {W.shape}")
    if not 2 <= clusters <= W.shape[0]:
        raise ConfigError(f"cluster count {clusters} must lie in [2, {W.shape[0]}]")
    _write_echo(cfg)
    labels = spectral_cluster(W, clusters, cfg.top_q, cfg.seed, cfg.n_init, cfg.eigen_solver)
    path = cfg.out / LABELS_FILE
    save_labels(labels, path)
    return path


def cmd_eval(cfg: RunConfig, labels_path=None, ds=None):
    ds = load_dataset(cfg) if ds is None else ds
    labels_path = Path(labels_path or cfg.out / LABELS_FILE)
    if not labels_path.exists():
        raise ConfigError(f"labels {labels_path} not found; run 'udll cluster' first")
    pred = load_labels(labels_path)
    if pred.size != ds.n:
        raise DataFormatError(f"{labels_path} has {pred.size} labels but the dataset has {ds.n} samples")
    acc = clustering_accuracy(ds.labels, pred)
    mapping = best_mapping(ds.labels, pred)
    report = f"acc={acc:.2f}\nacc_exact={acc!r}\nn={ds.n}\npermutation={' '.join(map(str, mapping))}\n"
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / REPORT_FILE).write_text(report)
    return acc, report


def cmd_export_embedding(cfg: RunConfig, checkpoint=None, ds=None):
    ds = load_dataset(cfg) if ds is None else ds
    if checkpoint is None:
        checkpoint = cfg.out / FINETUNE_CKPT
        if not checkpoint.exists():
            checkpoint = cfg.out / PRETRAIN_CKPT
    state = _load_state(Path(checkpoint), cfg, ds)
    Z = encode(ds.images, state).T
    path = cfg.out / EMBEDDING_CSV
    _write_csv(path, [f"z{j}" for j in range(Z.shape[1])], Z)
    return path


def cmd_convert(cfg: RunConfig, target):
    """Write the configured dataset (after any resize) as a binary dataset file."""
    ds = load_dataset(cfg)
    Path(target).parent.mkdir(parents=True, exist_ok=True)
    save_binary(ds, target)
    return f"{target}: {ds.n} images of {ds.shape[0]}x{ds.shape[1]}, {ds.class_count} classes"


def cmd_run_all(cfg: RunConfig):
    ds = load_dataset(cfg)
    stages = [
        ("pretrain", lambda: cmd_pretrain(cfg, ds=ds)),
        ("graph", lambda: cmd_graph(cfg, ds=ds)),
        ("finetune", lambda: cmd_finetune(cfg, ds=ds)),
        ("cluster", lambda: cmd_cluster(cfg, ds=ds)),
        ("eval", lambda: cmd_eval(cfg, ds=ds)),
        ("export-embedding", lambda: cmd_export_embedding(cfg, ds=ds)),
    ]
    result = None
    for name, run in stages:
        try:
            out = run()
        except UDLLError as exc:
            tagged = copy.copy(exc)
            tagged.args = (f"stage {name}: {exc}",)
            raise tagged from exc
        if name == "eval":
            result = out
    return result


# -- entry point ------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--out", help="run directory (default: ./run)")
    common.add_argument("--dataset", help="dataset path (udlb file, PGM directory) or synth options")
    common.add_argument("--format", choices=["udlb", "pgm", "synth"])
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=int, help="neighbours per prior-graph column")
    common.add_argument("--alpha", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--epochs", type=int, help="fine-tuning epochs")
    common.add_argument("--pretrain-epochs", type=int, dest="epochs_pretrain")
    common.add_argument("--clusters", type=int, help="number of clusters (default: dataset class count)")
    common.add_argument("--eigen-solver", choices=["jacobi", "lapack"], dest="eigen_solver")
    common.add_argument("--resize", type=_pair, metavar="HxW", help="bilinear resize applied on load")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="udll", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"udll {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the autoencoder on reconstruction")
    p = sub.add_parser("graph", parents=[common], help="build the prior graph from pretrained codes")
    p.add_argument("--checkpoint")
    p = sub.add_parser("finetune", parents=[common], help="train with the self-expressive layer")
    p.add_argument("--checkpoint")
    p.add_argument("--graph")
    p = sub.add_parser("cluster", parents=[common], help="spectral clustering of W")
    p.add_argument("--W", dest="w_path")
    p = sub.add_parser("eval", parents=[common], help="clustering accuracy against dataset labels")
    p.add_argument("--labels")
    p = sub.add_parser("export-embedding", parents=[common], help="write latent codes as CSV")
    p.add_argument("--checkpoint")
    sub.add_parser("run-all", parents=[common], help="every stage in order")
    p = sub.add_parser("convert", parents=[common], help="save a dataset in the binary format")
    p.add_argument("target", help="output .udlb file")
    return parser


FLAG_KEYS = (
    "dataset", "format", "seed", "k", "alpha", "beta", "gamma", "epochs_pretrain", "clusters", "eigen_solver", "resize",
)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        out = Path(args.out or "run")
        config_path = args.config
        # later stages resume from the echo left by earlier ones
        if config_path is None and args.command not in ("pretrain", "run-all", "convert") and (out / CONFIG_FILE).exists():
            config_path = out / CONFIG_FILE
        file_values = read_config_file(config_path) if config_path else {}
        flags = {k: getattr(args, k) for k in FLAG_KEYS if getattr(args, k, None) is not None}
        if args.epochs is not None:
            flags["epochs_finetune"] = args.epochs
        cfg = resolve_config(file_values, flags, out)
        cmd = args.command
        if cmd == "pretrain":
            print(cmd_pretrain(cfg))
        elif cmd == "graph":
            print(cmd_graph(cfg, args.checkpoint))
        elif cmd == "finetune":
            print(cmd_finetune(cfg, args.checkpoint, args.graph))
        elif cmd == "cluster":
            print(cmd_cluster(cfg, args.w_path))
        elif cmd == "eval":
            print(cmd_eval(cfg, args.labels)[1], end="")
        elif cmd == "export-embedding":
            print(cmd_export_embedding(cfg, args.checkpoint))
        elif cmd == "convert":
            print(cmd_convert(cfg, args.target))
        else:
            print(cmd_run_all(cfg)[1], end="")
    except ConfigError as exc:
        print(f"udll {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"udll {args.command}: diverged: {exc}", file=sys.stderr)
        if exc.last_terms:
            print(f"last finite loss terms: {exc.last_terms}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConvergenceError as exc:
        print(f"udll {args.command}: {exc}", file=sys.stderr)
        return EXIT_NOCONVERGE
    except (DataFormatError, ShapeError, OSError, ValueError) as exc:
        print(f"udll {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
