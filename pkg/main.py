"""
sense-forge: sensible adversarial training experiments.

Train:      python main.py train --config configs/mnist.env --method sense --c 0.7 --out runs/sense
Evaluate:   python main.py eval --checkpoint runs/sense/model.ckpt --steps 40 --restarts 1
Attack:     python main.py attack --checkpoint runs/sense/model.ckpt
Curves:     python main.py convcheck --checkpoint runs/sense/model.ckpt --steps 100
Analytic:   python main.py analytic --setting ex1 --p 0.75 --eps 0.1
Synthetic:  python main.py synthetic --c 0.9 --gamma 8

Exit status: 0 success, 1 configuration error, 2 runtime failure.
"""

import logging
import os
import sys

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from threadpoolctl import threadpool_limits

load_dotenv()

from sense.attacks import worst_case_over_restarts
from sense.config import RunConfig, parse_args
from sense.datasets import LabeledSet, load_mnist, make_rng, mnist_paths, sample, subset
from sense.distributions import ThreeClusters
from sense.errors import ConfigError
from sense.models import build_model, example_losses, load_checkpoint, predict, save_checkpoint
from sense.oracles import (
    bayes_dominance_check,
    closed_form_risks,
    restricted_support_check,
    sensible_minimizer_check,
    verify_report,
)
from sense.reports import convergence_curves, emit_csv, eval_accuracy, write_manifest
from sense.trainer import three_clusters_experiment, train_nat, train_rat, train_sense

log = logging.getLogger("sense-forge")


def load_dataset(cfg: RunConfig, split: str) -> LabeledSet:
    """Training or test set; synthetic test sets are drawn with seed + 1."""
    n = cfg.data.n if split == "train" else cfg.data.test_n
    if cfg.data.source == "mnist":
        data = load_mnist(*mnist_paths(split, cfg.data.directory))
        return data if n >= len(data) else subset(data, n, cfg.seed)
    return sample(cfg.data.dist, n, cfg.seed if split == "train" else cfg.seed + 1)


class Run:
    """One command execution: collects artifacts and the summary as it goes."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.artifacts: list[str] = []
        self.summary: dict = {}
        self.checkpoint_hash: str | None = None

    def emit(self, table, name: str):
        emit_csv(table, self.cfg.out_dir / name)
        self.artifacts.append(name)

    def save(self, model, name: str) -> str:
        digest = save_checkpoint(model, self.cfg.out_dir / name)
        self.artifacts.append(name)
        return digest

    # ── Commands ─────────────────────────────────────────────────────────────

    def train(self):
        cfg = self.cfg
        data = load_dataset(cfg, "train")
        model = build_model(cfg.model)
        log.info(f"→ training {cfg.method} on {len(data)} {cfg.data.source} examples")
        if cfg.method == "sense":
            model, train_log = train_sense(model, data, cfg.sense, cfg.train)
        elif cfg.method == "rat":
            model, train_log = train_rat(model, data, cfg.attack, cfg.train)
        else:
            model, train_log = train_nat(model, data, cfg.train, attack=cfg.attack)

        self.checkpoint_hash = self.save(model, "model.ckpt")
        self.emit(train_log, "train_log.csv")
        last = train_log.records[-1]
        self.summary = {
            "method": cfg.method,
            "examples": len(data),
            "epochs": len(train_log.records),
            "final_nat_acc": last["nat_acc"],
            "final_rob_acc": last["rob_acc"],
            "checkpoint_hash": self.checkpoint_hash,
        }

    def attack(self):
        cfg = self.cfg
        model = load_checkpoint(cfg.checkpoint)
        data = load_dataset(cfg, "test")
        rng = make_rng(cfg.seed, "attack")
        frames = []
        for start in range(0, len(data), cfg.eval_chunk):
            x = data.inputs[start : start + cfg.eval_chunk]
            y = data.labels[start : start + cfg.eval_chunk]
            adv = worst_case_over_restarts(model, x, y, cfg.eval_attack, rng).worst
            flat = (adv - x).reshape(x.shape[0], -1)
            frame = pd.DataFrame(
                {
                    "index": np.arange(start, start + x.shape[0]),
                    "label": y,
                    "pred_nat": predict(model, x),
                    "pred_adv": predict(model, adv),
                    "loss_nat": example_losses(model, x, y),
                    "loss_adv": example_losses(model, adv, y),
                    "distance": np.linalg.norm(flat, ord=cfg.eval_attack.norm, axis=1),
                }
            )
            if data.feature_shape == (2,):
                frame["x1"], frame["x2"] = x[:, 0], x[:, 1]
                frame["adv1"], frame["adv2"] = adv[:, 0], adv[:, 1]
            frames.append(frame)
        table = pd.concat(frames, ignore_index=True)
        self.emit(table, "attack.csv")
        self.summary = {
            "examples": len(table),
            "nat_acc": float((table["pred_nat"] == table["label"]).mean()),
            "adv_acc": float(((table["pred_adv"] == table["label"]) & (table["pred_nat"] == table["label"])).mean()),
        }

    def eval(self):
        cfg = self.cfg
        model = load_checkpoint(cfg.checkpoint)
        data = load_dataset(cfg, "test")
        transfer = {}
        if cfg.transfer_checkpoint is not None:
            transfer[cfg.transfer_checkpoint.stem] = load_checkpoint(cfg.transfer_checkpoint)
        report = eval_accuracy(
            model,
            data,
            cfg.eval_attack,
            make_rng(cfg.seed, "eval"),
            c=cfg.eval_c,
            transfer=transfer,
            chunk=cfg.eval_chunk,
        )
        self.emit(report, "eval.csv")
        predicted = np.unique(predict(model, data.inputs))
        self.summary = {
            "examples": report.n,
            "natural_acc": report.natural_acc,
            **{f"robust_acc/{k}": v for k, v in report.robust_acc.items()},
            "classes_predicted": int(predicted.shape[0]),
        }

    def convcheck(self):
        cfg = self.cfg
        model = load_checkpoint(cfg.checkpoint)
        data = load_dataset(cfg, "test")
        k = min(cfg.convcheck_examples, len(data))
        picked = data if k == len(data) else subset(data, k, cfg.seed)
        losses, restarts = convergence_curves(
            model, picked.inputs, picked.labels, cfg.eval_attack, make_rng(cfg.seed, "convcheck")
        )
        self.emit(losses, "pgd_loss.csv")
        self.emit(restarts, "worst_case.csv")
        tail = losses.series["mean"][-min(20, len(losses.x)) :]
        self.summary = {
            "examples": k,
            "steps": cfg.eval_attack.steps,
            "restarts": cfg.eval_attack.restarts,
            "tail_loss_range": float(np.ptp(tail)),
            "final_worst_case_acc": float(restarts.series["robust_acc"][-1]),
        }

    def analytic(self):
        a = self.cfg.analytic
        report = closed_form_risks(a.setting, a.p, a.epsilon, a.alpha, a.sigma, a.gamma, a.m)
        self.emit(report, "risks.csv")
        self.summary = {k: v for k, v in report.metrics().items()}

        if a.verify_n:
            table = verify_report(report, a.verify_n, self.cfg.seed)
            self.emit(table, "risks_mc.csv")
            checked = table[table["flag"] == ""]
            gap = (checked["closed_form"] - checked["mc_estimate"]).abs() / checked["mc_stderr"].clip(lower=1e-12)
            self.summary["max_gap_in_stderr"] = float(gap.max()) if len(gap) else float("nan")

        if a.checks:
            minimizer = sensible_minimizer_check(seed=self.cfg.seed)
            dominance = bayes_dominance_check(seed=self.cfg.seed)
            corollary = restricted_support_check(seed=self.cfg.seed)
            checks = pd.DataFrame(
                [
                    {"check": "sensible_unique_minimizer", "holds": minimizer.holds, "detail": minimizer.minimizers.tolist()},
                    {"check": "bayes_dominance", "holds": dominance.holds, "detail": int(dominance.bayes_errors.size)},
                    {
                        "check": "restricted_support",
                        "holds": corollary.holds,
                        "detail": f"{corollary.worst_minimizer_risk:.6g}<={corollary.worst_bayes_set_risk:.6g}",
                    },
                ]
            )
            self.emit(checks, "checks.csv")
            self.summary["checks_hold"] = bool(checks["holds"].all())

    def synthetic(self):
        cfg, e = self.cfg, self.cfg.experiment
        dist = ThreeClusters(p=e.p, sigma=e.sigma, m=e.m)
        self.emit(sample(dist, e.sample_n, cfg.seed).to_frame(), "samples.csv")
        result = three_clusters_experiment(dist, e.n, e.gamma, e.c, e.lr, e.iterations, cfg.seed)
        self.emit(result.trajectories, "trajectories.csv")
        self.emit(result.summary, "convergence.csv")
        self.checkpoint_hash = self.save(result.sense_model, "sense.ckpt")
        self.save(result.rat_model, "rat.ckpt")
        for row in result.summary.to_dict("records"):
            method = row.pop("method")
            self.summary.update({f"{method}/{k}": v for k, v in row.items()})


def run(cfg: RunConfig) -> int:
    """Execute one configured command; the manifest is written whatever happens."""
    job = Run(cfg)
    status = "ok"
    try:
        getattr(job, cfg.command)()
    except Exception as e:
        status = "failed"
        job.summary["error"] = f"{type(e).__name__}: {e}"
        log.error(f"❌ {cfg.command} failed: {e}")
        log.debug("traceback", exc_info=True)

    write_manifest(cfg.out_dir, cfg.values, cfg.seed, status, job.artifacts, job.checkpoint_hash, job.summary)
    print(f"\n{'='*60}")
    print(f"{'✅' if status == 'ok' else '❌'} sense-forge {cfg.command}: {status}")
    print(f"   Config:   {cfg.config_hash}  seed={cfg.seed}")
    print(f"   Output:   {cfg.out_dir}")
    for key, value in job.summary.items():
        shown = f"{value:.6g}" if isinstance(value, float) else value
        print(f"   {key}: {shown}")
    print(f"{'='*60}\n")
    return 0 if status == "ok" else 2


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.getenv("SENSE_FORGE_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    try:
        cfg = parse_args(sys.argv[1:] if argv is None else list(argv))
        threads = os.getenv("SENSE_FORGE_THREADS", "")
        if threads and not (threads.isdigit() and int(threads) > 0):
            raise ConfigError("SENSE_FORGE_THREADS", f"expected a positive integer, got '{threads}'")
    except ConfigError as e:
        log.error(f"❌ configuration error: {e}")
        return 1

    if threads:
        with threadpool_limits(limits=int(threads)):
            return run(cfg)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
