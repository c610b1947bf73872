"""Command-line interface: filter | attack | adaptive | train | eval | report.

Every run emits exactly one manifest JSON recording the subcommand, the
fully resolved configuration, the seed, input hashes, output paths, and
wall-clock time. Config precedence is flags > --config file (a plain JSON
object or a previously emitted manifest) > built-in protocol defaults
(eps=0.3, PGD-40, MI-FGSM mu=1.0 with 10 iterations, CIFAR eps=8 on the
0-255 scale with 20-step PGD at step size 2/255*2).

Dataset arguments accept either a container path (.bft) or a spec of the
form mnist-train, mnist-test[:N], cifar-train[:N], cifar-test[:N], resolved
against the BFSHIELD_DATA root.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .adaptive import ParamGrid, build_adaptive_training_set, default_grid, defend, train_adaptive
from .attacks import ATTACKS, AttackConfig, run_attack
from .bilateral import FilterParams, bilateral_filter
from .data import (
    Dataset,
    bytes_to_unit,
    load_cifar10,
    load_dataset,
    load_mnist,
    read_ppm,
    save_dataset,
    write_ppm,
)
from .errors import BfshieldError, ConfigError
from .networks import Network, build_adaptive_net, build_cifar_cnn, build_mnist_cnn, save_tensors, load_tensors, wrap_bfnet
from .permutohedral import bilateral_lattice_filter
from .training import TrainConfig, accuracy, evaluate_attack, evaluate_recovery, train_adversarial, train_natural

MNIST_EPS = 0.6  # protocol eps 0.3 on the [0,1] MNIST convention, converted to [-1,1]
CIFAR_EPS = 8 / 255 * 2  # L-inf bound of 8 on the 0-255 scale, converted to [-1,1]
CIFAR_PGD_LR = 2 / 255 * 2


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config_file(path) -> dict:
    if not path:
        return {}
    doc = json.loads(Path(path).read_text())
    return doc.get("config", doc)  # accept a manifest or a bare config object


def _resolve(ctx_params: dict, file_cfg: dict, defaults: dict) -> dict:
    """flags > config file > defaults; a flag counts only when explicitly set."""
    out = dict(defaults)
    out.update({k: v for k, v in file_cfg.items() if k in defaults})
    out.update({k: v for k, v in ctx_params.items() if v is not None and k in defaults})
    return out

def _write_manifest(subcommand: str, config: dict, inputs: list, outputs: list, started: float, manifest_path=None):
    doc = {
        "subcommand": subcommand,
        "config": config,
        "seed": config.get("seed"),
        "version": __version__,
        "input_hashes": {str(p): _sha256(p) for p in inputs if p and Path(p).exists()},
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = Path(manifest_path) if manifest_path else (Path(str(outputs[0]) + ".manifest.json") if outputs else Path(f"{subcommand}.manifest.json"))
    path.write_text(json.dumps(doc, indent=2))
    return path


def _load_spec(spec: str, limit=None) -> Dataset:
    s = str(spec)
    if ":" in s and not Path(s).exists():
        s, _, count = s.rpartition(":")
        limit = int(count)
    if s in ("mnist-train", "mnist-test"):
        train, test = load_mnist()
        ds = train if s.endswith("train") else test
    elif s in ("cifar-train", "cifar-test"):
        train, test = load_cifar10()
        ds = train if s.endswith("train") else test
    elif Path(s).exists():
        ds = load_dataset(s)
    else:
        raise ConfigError(f"unknown dataset spec {spec!r} (container path or mnist-/cifar-train/test[:N])")
    if limit:
        ds = ds.subset(np.arange(min(limit, len(ds))))
    return ds


def _load_model(path) -> Network:
    return Network.load(path)


@click.group()
def cli():
    """Bilateral filtering as an adversarial-example defense."""


# ---------------------------------------------------------------------------
# filter
# ---------------------------------------------------------------------------


@cli.command("filter")
@click.option("--k", type=int, default=None, help="odd window width [default 3]")
@click.option("--sigma-s", type=float, default=None, help="spatial stddev in pixels [default 0.5]")
@click.option("--sigma-r", type=float, default=None, help="range stddev in [-1,1] units [default 0.5]")
@click.option("--engine", type=click.Choice(["exact", "lattice"]), default=None, help="exact windowed filter or O(n) lattice [default exact]")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True), help="input PPM/PGM (P5/P6)")
@click.option("--out", "out_path", required=True, type=click.Path(), help="output PPM/PGM")
@click.option("--config", type=click.Path(exists=True), default=None, help="JSON config or manifest")
@click.option("--manifest", type=click.Path(), default=None, help="manifest output path")
def filter_cmd(k, sigma_s, sigma_r, engine, in_path, out_path, config, manifest):
    """Bilaterally filter one image file."""
    started = time.time()
    cfg = _resolve(
        {"k": k, "sigma_s": sigma_s, "sigma_r": sigma_r, "engine": engine},
        _load_config_file(config),
        {"k": 3, "sigma_s": 0.5, "sigma_r": 0.5, "engine": "exact", "seed": 0},
    )
    img = bytes_to_unit(read_ppm(in_path))
    params = FilterParams(cfg["k"], cfg["sigma_s"], cfg["sigma_r"])
    out = bilateral_lattice_filter(img, params) if cfg["engine"] == "lattice" else bilateral_filter(img, params)
    write_ppm(out_path, out)
    cfg["in"], cfg["out"] = str(in_path), str(out_path)
    _write_manifest("filter", cfg, [in_path], [out_path], started, manifest)
    click.echo(f"wrote {out_path}")


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------


@cli.command("attack")
@click.option("--method", type=click.Choice(list(ATTACKS)), required=True)
@click.option("--model", "model_path", required=True, type=click.Path(exists=True), help="model checkpoint (.bft)")
@click.option("--in", "in_spec", required=True, help="dataset container or spec (e.g. mnist-test:200)")
@click.option("--out", "out_path", required=True, type=click.Path(), help="adversarial container output")
@click.option("--eps", type=float, default=None, help="L-inf budget in [-1,1] units [MNIST protocol default 0.6 = 0.3 on the [0,1] scale]")
@click.option("--steps", type=int, default=None, help="iterations [protocol defaults: PGD 40, MI-FGSM 10]")
@click.option("--step-size", type=float, default=None, help="per-step size [default 2.5*eps/steps (pgd), eps/steps (mifgsm)]")
@click.option("--mu", type=float, default=None, help="MI-FGSM momentum decay [protocol default 1.0]")
@click.option("--kappa", type=float, default=None, help="CW confidence [default 0]")
@click.option("--target", type=int, default=None, help="target class for lbfgs/cw (omit for untargeted wrapper)")
@click.option("--raw-momentum-step", is_flag=True, default=None, help="MI-FGSM: step by alpha*g instead of alpha*sign(g)")
@click.option("--zero-start", is_flag=True, default=None, help="PGD: start at the source image instead of a random point")
@click.option("--limit", type=int, default=None, help="attack only the first N images")
@click.option("--seed", type=int, default=None)
@click.option("--jobs", type=int, default=1, help="worker count (results are order-stable)")
@click.option("--deterministic", is_flag=True, default=False, help="single-threaded ordered mode")
@click.option("--dump-ppm", "dump_dir", type=click.Path(), default=None, help="write clean/adversarial/perturbation PPM triplets here")
@click.option("--dump-limit", type=int, default=8, help="how many triplets to dump")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--manifest", type=click.Path(), default=None)
def attack_cmd(method, model_path, in_spec, out_path, eps, steps, step_size, mu, kappa, target, raw_momentum_step, zero_start, limit, seed, jobs, deterministic, dump_dir, dump_limit, config, manifest):
    """Generate an adversarial dataset with one of the six attacks."""
    started = time.time()
    defaults = {
        "eps": MNIST_EPS,
        "steps": {"pgd": 40, "pgd-cw": 40, "mifgsm": 10}.get(method, 40),
        "step_size": None,
        "mu": 1.0,
        "kappa": 0.0,
        "target": None,
        "raw_momentum_step": False,
        "zero_start": False,
        "limit": None,
        "seed": 0,
    }
    cfg = _resolve(
        {"eps": eps, "steps": steps, "step_size": step_size, "mu": mu, "kappa": kappa, "target": target,
         "raw_momentum_step": raw_momentum_step, "zero_start": zero_start, "limit": limit, "seed": seed},
        _load_config_file(config),
        defaults,
    )
    data = _load_spec(in_spec, cfg["limit"])
    net = _load_model(model_path)
    acfg = AttackConfig(
        epsilon=cfg["eps"],
        steps=cfg["steps"],
        step_size=cfg["step_size"],
        momentum_decay=cfg["mu"],
        confidence_kappa=cfg["kappa"],
        target_label=cfg["target"],
        random_start=not cfg["zero_start"],
        raw_momentum_step=cfg["raw_momentum_step"],
        seed=cfg["seed"],
    )
    batch = 128 if method in ("fgsm", "pgd", "pgd-cw", "mifgsm", "deepfool") else 16
    adv_images = np.empty_like(data.images)
    records = []

    def run_chunk(start):
        xb = data.images[start : start + batch]
        yb = data.labels[start : start + batch]
        res = run_attack(method, net, xb, yb, acfg)
        return start, res if isinstance(res, list) else [res]

    starts = list(range(0, len(data), batch))
    if deterministic or jobs <= 1:
        chunks = map(run_chunk, starts)
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(run_chunk, starts))
    for start, res in chunks:
        for i, r in enumerate(res):
            adv_images[start + i] = r.adversarial
            records.append({"success": bool(r.success), "iterations": r.iterations_used, "l2": r.l2_distance, "linf": r.linf_distance})
    adv = Dataset(
        adv_images,
        data.labels,
        provenance={
            "kind": "adversarial",
            "attack": method,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in acfg.__dict__.items()},
            "source": str(in_spec),
            "source_sha256": data.sha256(),
            "results": records,
        },
        alignment=np.arange(len(data)),
    )
    save_dataset(out_path, adv)
    if dump_dir:
        from .data import perturbation_to_bytes

        d = Path(dump_dir)
        d.mkdir(parents=True, exist_ok=True)
        scales = {}
        for i in range(min(dump_limit, len(data))):
            write_ppm(d / f"{i:03d}_clean.ppm", data.images[i])
            write_ppm(d / f"{i:03d}_adv.ppm", adv_images[i])
            img, scale = perturbation_to_bytes(adv_images[i].astype(np.float64) - data.images[i].astype(np.float64))
            write_ppm(d / f"{i:03d}_delta.ppm", img)
            scales[f"{i:03d}"] = scale
        (d / "delta_scales.json").write_text(json.dumps(scales, indent=2))
    cfg.update({"method": method, "model": str(model_path), "in": str(in_spec), "out": str(out_path)})
    _write_manifest("attack", cfg, [model_path], [out_path], started, manifest)
    succ = np.mean([r["success"] for r in records]) if records else 0.0
    click.echo(f"attacked {len(data)} images, success rate {succ:.3f}, wrote {out_path}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@cli.command("train")
@click.option("--arch", type=click.Choice(["mnist", "cifar"]), required=True)
@click.option("--data", "data_spec", default=None, help="training set spec [default {arch}-train]")
@click.option("--out", "out_path", required=True, type=click.Path(), help="checkpoint output (.bft)")
@click.option("--bf", is_flag=True, default=None, help="prepend the differentiable bilateral filter layer")
@click.option("--k", type=int, default=None, help="BF window [default 3]")
@click.option("--sigma-s", type=float, default=None, help="BF spatial stddev [default 0.5]")
@click.option("--sigma-r", type=float, default=None, help="BF range stddev [default 0.5]")
@click.option("--trainable-sigmas/--fixed-sigmas", default=None, help="train the BF sigmas jointly [default trainable]")
@click.option("--adversary", type=click.Choice(["none", "fgsm", "pgd"]), default=None, help="adversarial training [default none]")
@click.option("--eps", type=float, default=None, help="adversary budget in [-1,1] units [MNIST protocol 0.6 (0.3 on [0,1]); CIFAR 8/255*2]")
@click.option("--attack-steps", type=int, default=None, help="inner PGD steps during training [default 7; eval runs full budget]")
@click.option("--epochs", type=int, default=None)
@click.option("--batch", type=int, default=None)
@click.option("--optimizer", type=click.Choice(["adam", "sgd", "nesterov"]), default=None, help="[default adam; CIFAR natural protocol: adam]")
@click.option("--lr", type=float, default=None)
@click.option("--limit", type=int, default=None, help="train on the first N images only")
@click.option("--seed", type=int, default=None)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--manifest", type=click.Path(), default=None)
def train_cmd(arch, data_spec, out_path, bf, k, sigma_s, sigma_r, trainable_sigmas, adversary, eps, attack_steps, epochs, batch, optimizer, lr, limit, seed, config, manifest):
    """Train a CNN (optionally a BFNet, optionally adversarially)."""
    started = time.time()
    defaults = {
        "data": f"{arch}-train",
        "bf": False,
        "k": 3,
        "sigma_s": 0.5,
        "sigma_r": 0.5,
        "trainable_sigmas": True,
        "adversary": "none",
        "eps": MNIST_EPS if arch == "mnist" else CIFAR_EPS,
        "attack_steps": 7,
        "epochs": 2,
        "batch": 64,
        "optimizer": "adam",
        "lr": 1e-3,
        "limit": None,
        "seed": 0,
    }
    cfg = _resolve(
        {"data": data_spec, "bf": bf, "k": k, "sigma_s": sigma_s, "sigma_r": sigma_r, "trainable_sigmas": trainable_sigmas,
         "adversary": adversary, "eps": eps, "attack_steps": attack_steps, "epochs": epochs, "batch": batch,
         "optimizer": optimizer, "lr": lr, "limit": limit, "seed": seed},
        _load_config_file(config),
        defaults,
    )
    data = _load_spec(cfg["data"], cfg["limit"])
    net = build_mnist_cnn(seed=cfg["seed"]) if arch == "mnist" else build_cifar_cnn(seed=cfg["seed"])
    if cfg["bf"]:
        net = wrap_bfnet(net, FilterParams(cfg["k"], cfg["sigma_s"], cfg["sigma_r"]), trainable=cfg["trainable_sigmas"])
    tcfg = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch"],
        optimizer=cfg["optimizer"],
        lr=cfg["lr"],
        adversary=None if cfg["adversary"] == "none" else cfg["adversary"],
        attack=AttackConfig(epsilon=cfg["eps"], steps=cfg["attack_steps"], seed=cfg["seed"]),
        seed=cfg["seed"],
    )
    history = train_natural(net, data, tcfg) if tcfg.adversary is None else train_adversarial(net, data, tcfg)
    net.save(out_path)
    curve_path = Path(str(out_path) + ".loss.csv")
    with open(curve_path, "w") as f:
        f.write("batch,loss\n")
        for i, v in enumerate(history["loss"]):
            f.write(f"{i},{v}\n")
    cfg.update({"arch": arch, "out": str(out_path)})
    _write_manifest("train", cfg, [], [out_path, curve_path], started, manifest)
    click.echo(f"trained {arch} ({'bf' if cfg['bf'] else 'plain'}, adversary={cfg['adversary']}), final epoch loss {history['epoch_loss'][-1]:.4f}")
    if history.get("aborted"):
        raise ConfigError("training diverged; checkpoint holds the last good state")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


@cli.command("eval")
@click.option("--model", "model_path", type=click.Path(exists=True), default=None, help="model checkpoint")
@click.option("--data", "data_spec", default=None, help="clean dataset spec")
@click.option("--attack", "attack_name", type=click.Choice(list(ATTACKS)), default=None, help="evaluate under this attack")
@click.option("--adv", "adv_path", type=click.Path(exists=True), default=None, help="adversarial container (for --recovery)")
@click.option("--recovery", is_flag=True, default=False, help="recovery-rate mode: needs --data, --adv, filter params")
@click.option("--k", type=int, default=None)
@click.option("--sigma-s", type=float, default=None)
@click.option("--sigma-r", type=float, default=None)
@click.option("--eps", type=float, default=None)
@click.option("--steps", type=int, default=None, help="attack iterations [MNIST protocol: PGD-40; CIFAR protocol: PGD-20 at step size 2/255*2]")
@click.option("--limit", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--suite", type=click.Choice(["mnist-pgd"]), default=None, help="regenerate the desk-scale results table as CSV")
@click.option("--out", "out_path", type=click.Path(), default=None, help="report JSON path [default eval-report.json]")
@click.option("--csv", "csv_path", type=click.Path(), default=None, help="also write per-sample CSV")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--manifest", type=click.Path(), default=None)
def eval_cmd(model_path, data_spec, attack_name, adv_path, recovery, k, sigma_s, sigma_r, eps, steps, limit, seed, suite, out_path, csv_path, config, manifest):
    """Clean accuracy, accuracy under attack, or filtering recovery rate."""
    started = time.time()
    defaults = {"k": 3, "sigma_s": 0.5, "sigma_r": 0.5, "eps": MNIST_EPS, "steps": 40, "limit": None, "seed": 0}
    cfg = _resolve(
        {"k": k, "sigma_s": sigma_s, "sigma_r": sigma_r, "eps": eps, "steps": steps, "limit": limit, "seed": seed},
        _load_config_file(config),
        defaults,
    )
    out_path = out_path or "eval-report.json"
    if suite == "mnist-pgd":
        _suite_mnist_pgd(model_path, cfg, out_path, started, manifest)
        return
    if model_path is None or data_spec is None:
        raise ConfigError("--model and --data are required (or use --suite)")
    net = _load_model(model_path)
    data = _load_spec(data_spec, cfg["limit"])
    if recovery:
        if adv_path is None:
            raise ConfigError("--recovery requires --adv")
        adv = load_dataset(adv_path)
        if cfg["limit"]:
            adv = adv.subset(np.arange(min(cfg["limit"], len(adv))))
        report = evaluate_recovery(net, data, adv, FilterParams(cfg["k"], cfg["sigma_s"], cfg["sigma_r"]))
    elif attack_name:
        acfg = AttackConfig(epsilon=cfg["eps"], steps=cfg["steps"], seed=cfg["seed"])
        report = evaluate_attack(net, attack_name, data, acfg)
    else:
        from .training import EvalReport

        report = EvalReport(kind="clean", sample_count=len(data), clean_accuracy=accuracy(net, data))
    report.to_json(out_path)
    if csv_path:
        report.to_csv(csv_path)
    cfg.update({"model": model_path, "data": data_spec, "attack": attack_name, "recovery": recovery})
    _write_manifest("eval", cfg, [p for p in (model_path, adv_path) if p], [out_path], started, manifest)
    headline = report.recovery_rate if recovery else (report.accuracy_under_attack if attack_name else report.clean_accuracy)
    click.echo(f"{report.kind}: {headline:.4f} over {report.sample_count} samples -> {out_path}")


def _suite_mnist_pgd(model_path, cfg, out_path, started, manifest):
    """Clean / FGSM / PGD accuracy rows for a trained MNIST model, as CSV."""
    if model_path is None:
        raise ConfigError("--suite mnist-pgd requires --model")
    net = _load_model(model_path)
    _, test = load_mnist()
    n = cfg["limit"] or 1000
    data = test.subset(np.arange(min(n, len(test))))
    rows = [("clean", accuracy(net, data))]
    for name, acfg in (
        ("fgsm", AttackConfig(epsilon=cfg["eps"], steps=1, seed=cfg["seed"])),
        ("pgd", AttackConfig(epsilon=cfg["eps"], steps=cfg["steps"], seed=cfg["seed"])),
    ):
        rep = evaluate_attack(net, name, data, acfg)
        rows.append((name, rep.accuracy_under_attack))
    out = Path(out_path).with_suffix(".csv") if str(out_path).endswith(".json") else Path(out_path)
    with open(out, "w") as f:
        f.write("setting,accuracy\n")
        for name, acc in rows:
            f.write(f"{name},{acc}\n")
    _write_manifest("eval", {**cfg, "suite": "mnist-pgd", "model": str(model_path)}, [model_path], [out], started, manifest)
    click.echo("\n".join(f"{name}: {acc:.4f}" for name, acc in rows) + f"\n-> {out}")


# ---------------------------------------------------------------------------
# adaptive
# ---------------------------------------------------------------------------


@cli.group("adaptive")
def adaptive_group():
    """Label recovery candidates, train the predictor, apply the defense."""


@adaptive_group.command("label")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--clean", "clean_spec", required=True)
@click.option("--adv", "adv_paths", required=True, multiple=True, type=click.Path(exists=True), help="adversarial container(s), one per attack")
@click.option("--out", "out_path", required=True, type=click.Path(), help="labeled training-set container")
@click.option("--include-clean/--no-include-clean", default=True, help="append clean images labeled with prediction-preserving candidates")
@click.option("--limit", type=int, default=None)
@click.option("--manifest", type=click.Path(), default=None)
def adaptive_label(model_path, clean_spec, adv_paths, out_path, include_clean, limit, manifest):
    """Collect per-candidate recovery flags (default 24-candidate grid)."""
    started = time.time()
    net = _load_model(model_path)
    clean = _load_spec(clean_spec, limit)
    advs = []
    for p in adv_paths:
        ds = load_dataset(p)
        advs.append(ds.subset(np.arange(min(limit, len(ds)))) if limit else ds)
    grid = default_grid()
    images, flags, stats = build_adaptive_training_set(net, clean, advs, grid, include_clean=include_clean)
    save_tensors(out_path, [images, flags.astype(np.float32)])
    doc = {"schema": "bfshield-adaptive-trainset-v1", "count": len(flags), **stats}
    Path(str(out_path) + ".json").write_text(json.dumps(doc, indent=2))
    _write_manifest("adaptive-label", {"model": str(model_path), "clean": clean_spec, "adv": [str(p) for p in adv_paths],
                                       "include_clean": include_clean, "seed": 0}, [model_path, *adv_paths], [out_path], started, manifest)
    click.echo(f"labeled {len(flags)} rows ({stats['all_negative']} all-negative), positives/image {flags.sum(1).mean():.2f} -> {out_path}")


@adaptive_group.command("train")
@click.option("--trainset", "trainset_path", required=True, type=click.Path(exists=True), help="labeled container from 'adaptive label'")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--epochs", type=int, default=25, help="[protocol default 25, SGD with Nesterov momentum]")
@click.option("--lr", type=float, default=0.01)
@click.option("--seed", type=int, default=0)
@click.option("--manifest", type=click.Path(), default=None)
def adaptive_train(trainset_path, out_path, epochs, lr, seed, manifest):
    """Train the filter-parameter predictor on recovery labels."""
    started = time.time()
    tensors = load_tensors(trainset_path)
    images, flags = tensors[0], tensors[1]
    doc = json.loads(Path(str(trainset_path) + ".json").read_text())
    grid = ParamGrid(tuple(tuple(c) for c in doc["grid"]))
    h, w, c = images.shape[1:]
    net = build_adaptive_net(len(grid), image_shape=(h, w, c), seed=seed)
    cfg = TrainConfig(epochs=epochs, batch_size=32, optimizer="nesterov", lr=lr, seed=seed)
    hist = train_adaptive(net, images, flags, cfg)
    net.save(out_path)
    Path(str(out_path) + ".grid.json").write_text(json.dumps({"grid": grid.as_lists()}, indent=2))
    _write_manifest("adaptive-train", {"trainset": str(trainset_path), "epochs": epochs, "lr": lr, "seed": seed}, [trainset_path], [out_path], started, manifest)
    click.echo(f"trained predictor (dropped {hist['dropped']} all-negative samples), final loss {hist['epoch_loss'][-1]:.4f}")


@adaptive_group.command("defend")
@click.option("--predictor", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--in", "in_spec", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--limit", type=int, default=None)
@click.option("--manifest", type=click.Path(), default=None)
def adaptive_defend(pred_path, model_path, in_spec, out_path, limit, manifest):
    """Filter every image with its predicted parameters; reports defended accuracy."""
    started = time.time()
    predictor = _load_model(pred_path)
    net = _load_model(model_path)
    grid_doc = json.loads(Path(str(pred_path) + ".grid.json").read_text())
    grid = ParamGrid(tuple(tuple(c) for c in grid_doc["grid"]))
    data = _load_spec(in_spec, limit)
    filtered, chosen = defend(predictor, net, data.images, grid)
    out = Dataset(filtered, data.labels, provenance={"kind": "defended", "source": str(in_spec), "chosen": [list(c.as_tuple()) for c in chosen]})
    save_dataset(out_path, out)
    acc = float((net.predict(filtered) == data.labels).mean())
    _write_manifest("adaptive-defend", {"predictor": str(pred_path), "model": str(model_path), "in": str(in_spec), "seed": 0}, [pred_path, model_path], [out_path], started, manifest)
    click.echo(f"defended accuracy {acc:.4f} over {len(data)} images -> {out_path}")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@cli.command("report")
@click.option("--from", "report_path", required=True, type=click.Path(exists=True), help="report JSON from 'eval'")
@click.option("--csv", "csv_path", type=click.Path(), default=None, help="write per-sample rows as CSV")
def report_cmd(report_path, csv_path):
    """Render an eval report: summary to stdout, optional per-sample CSV."""
    doc = json.loads(Path(report_path).read_text())
    for key in ("kind", "attack", "sample_count", "clean_accuracy", "accuracy_under_attack", "success_rate", "recovery_rate", "mean_l2", "median_l2", "mean_linf", "median_linf"):
        if doc.get(key) is not None:
            click.echo(f"{key}: {doc[key]}")
    if csv_path:
        rows = doc.get("per_sample") or [{}]
        keys = sorted({k for r in rows for k in r})
        with open(csv_path, "w") as f:
            f.write(",".join(keys) + "\n")
            for r in rows:
                f.write(",".join(str(r.get(k, "")) for k in keys) + "\n")
        click.echo(f"-> {csv_path}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.UsageError as e:
        e.show()
        return 2
    except click.exceptions.Abort:
        return 2
    except click.exceptions.ClickException as e:
        e.show()
        return 1
    except BfshieldError as e:
        click.echo(f"error: {e}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
