"""Pipeline stages over a run directory. Each stage reads its inputs from
disk, writes its outputs, and returns a JSON-able summary; both the CLI
and the HTTP service are thin wrappers over these functions.

Stage outputs in a run directory:
    world.bin, train.jsonl, test.jsonl, gen_meta.json        (generate)
    checkpoint.bin, train_log.jsonl                          (train)
    front.csv                                                (eval-offline)
    impressions.csv, kpis.csv, sim_meta.json                 (simulate)
    report.csv, report.txt, scatter.csv, plot_H*.svg         (analyze)
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from . import absim, metrics, model as model_mod, plots, stats, training, world as world_mod
from .config import (
    STREAM_EXPERIMENT, STREAM_MODEL_INIT, STREAM_SESSIONS, STREAM_TRAIN,
    STREAM_WORLD, RunConfig, derive_seed,
)
from .objectives import LossConfig
from .sessions import Dataset, parse_sessions, temporal_split, write_sessions

WORLD_FILE = "world.bin"
TRAIN_FILE = "train.jsonl"
TEST_FILE = "test.jsonl"
GEN_META_FILE = "gen_meta.json"
CHECKPOINT_FILE = "checkpoint.bin"
TRAIN_LOG_FILE = "train_log.jsonl"
FRONT_FILE = "front.csv"
IMPRESSIONS_FILE = "impressions.csv"
KPIS_FILE = "kpis.csv"
SIM_META_FILE = "sim_meta.json"
REPORT_FILE = "report.csv"
REPORT_TEXT_FILE = "report.txt"
SCATTER_FILE = "scatter.csv"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


def _loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(
        reg_weight=cfg.loss.reg_weight,
        n_negatives=cfg.loss.n_negatives,
        use_distortion=cfg.loss.use_distortion,
        exact_softmax_threshold=cfg.loss.exact_softmax_threshold,
    )


def _require(out_dir: str, filename: str, stage: str) -> str:
    path = os.path.join(out_dir, filename)
    if not os.path.exists(path):
        raise PipelineError(stage, f"missing input {path}; run the earlier stage first")
    return path


def generate(cfg: RunConfig, out_dir: str) -> dict:
    """Sample the world and a temporally split session dataset."""
    os.makedirs(out_dir, exist_ok=True)
    world_seed = derive_seed(cfg.seed, STREAM_WORLD)
    sess_seed = derive_seed(cfg.seed, STREAM_SESSIONS)
    world = world_mod.generate_world(cfg.world, world_seed)
    dataset = world_mod.sample_sessions(
        world, cfg.world.n_sessions, sess_seed,
        mean_session_len=cfg.world.mean_session_len)
    n = len(dataset.sessions)
    n_train = min(max(int(round(n * cfg.world.train_fraction)), 1), n - 1)
    split_ts = dataset.sessions[n_train].start_ts
    train_set, test_set = temporal_split(dataset, split_ts)
    world_mod.save_world(world, os.path.join(out_dir, WORLD_FILE))
    write_sessions(train_set, os.path.join(out_dir, TRAIN_FILE))
    write_sessions(test_set, os.path.join(out_dir, TEST_FILE))
    summary = {
        "catalog_size": world.catalog_size,
        "n_sessions": n,
        "n_train_sessions": len(train_set.sessions),
        "n_test_sessions": len(test_set.sessions),
        "split_ts": split_ts,
        "attract_convert_corr_target": world.corr_target,
        "attract_convert_corr_achieved": world.corr_achieved,
        "world_seed": world_seed,
        "sessions_seed": sess_seed,
    }
    with open(os.path.join(out_dir, GEN_META_FILE), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def train(cfg: RunConfig, out_dir: str, resume: str | None = None) -> dict:
    """Train the preference-conditioned model on the generated train split."""
    train_path = _require(out_dir, TRAIN_FILE, "train")
    dataset = parse_sessions(train_path)
    if resume is not None:
        params, hp, epochs_done = model_mod.load_checkpoint(resume)
        if hp.catalog_size != dataset.catalog_size:
            raise PipelineError("train", f"checkpoint catalog {hp.catalog_size} != dataset "
                                         f"catalog {dataset.catalog_size}")
    else:
        hp = model_mod.Hyperparams(
            catalog_size=dataset.catalog_size,
            embed_dim=cfg.model.embed_dim,
            hidden_dim=cfg.model.hidden_dim,
            pref_dim=2,
            max_prefix_len=cfg.model.max_prefix_len,
            seed=derive_seed(cfg.seed, STREAM_MODEL_INIT),
        )
        params = model_mod.init_model(hp, position_decay=cfg.model.position_decay)
        epochs_done = 0
    opt = training.TrainOptions(
        epochs=cfg.train.epochs,
        batch_size=cfg.train.batch_size,
        learning_rate=cfg.train.learning_rate,
        optimizer=cfg.train.optimizer,
        adam_beta1=cfg.train.adam_beta1,
        adam_beta2=cfg.train.adam_beta2,
        adam_eps=cfg.train.adam_eps,
        update_position_decay=cfg.train.update_position_decay,
        dirichlet_beta=tuple(cfg.loss.dirichlet_beta),
        epsilon_clip=cfg.loss.epsilon_clip,
    )
    train_seed = derive_seed(cfg.seed, STREAM_TRAIN) + epochs_done
    params, log = training.train(params, hp, dataset, _loss_config(cfg), opt,
                                 seed=train_seed, start_epoch=epochs_done)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_FILE)
    model_mod.save_checkpoint(params, hp, ckpt_path,
                              epochs_trained=epochs_done + cfg.train.epochs)
    with open(os.path.join(out_dir, TRAIN_LOG_FILE), "w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return {
        "checkpoint": ckpt_path,
        "epochs_trained": epochs_done + cfg.train.epochs,
        "n_train_sessions": len(dataset.sessions),
        "first_epoch": log[0] if log else None,
        "last_epoch": log[-1] if log else None,
    }


def eval_offline(cfg: RunConfig, out_dir: str) -> dict:
    """Sweep the preference grid over the test split and write the front table."""
    ckpt_path = _require(out_dir, CHECKPOINT_FILE, "eval-offline")
    test_path = _require(out_dir, TEST_FILE, "eval-offline")
    params, hp, _ = model_mod.load_checkpoint(ckpt_path)
    test_set = parse_sessions(test_path)
    if test_set.catalog_size != hp.catalog_size:
        raise PipelineError("eval-offline", f"checkpoint catalog {hp.catalog_size} != test "
                                            f"catalog {test_set.catalog_size}")
    points = metrics.sweep_front(params, test_set, cfg.metrics.k,
                                 cfg.metrics.preferences, hp.max_prefix_len)
    metrics.write_front(points, os.path.join(out_dir, FRONT_FILE))
    return {
        "front": os.path.join(out_dir, FRONT_FILE),
        "points": [pt.__dict__ for pt in points],
    }


def simulate(cfg: RunConfig, out_dir: str) -> dict:
    """Run the simulated A/B experiment and write the impression log."""
    ckpt_path = _require(out_dir, CHECKPOINT_FILE, "simulate")
    world_path = _require(out_dir, WORLD_FILE, "simulate")
    params, hp, _ = model_mod.load_checkpoint(ckpt_path)
    world = world_mod.load_world(world_path)
    if world.catalog_size != hp.catalog_size:
        raise PipelineError("simulate", f"checkpoint catalog {hp.catalog_size} != world "
                                        f"catalog {world.catalog_size}")
    prefs = np.asarray(cfg.metrics.preferences, dtype=np.float64)
    g = prefs.shape[0]
    shares = cfg.experiment.shares
    ga = (absim.GroupAssignment(n_groups=g, salt=cfg.experiment.salt, shares=tuple(shares))
          if shares is not None else absim.GroupAssignment.uniform(g, cfg.experiment.salt))
    override = np.asarray(cfg.experiment.aa_preference, dtype=np.float64) \
        if cfg.experiment.aa_mode else None
    log, meta = absim.simulate_experiment(
        world, params, prefs, ga,
        n_impressions=cfg.experiment.n_impressions,
        seed=derive_seed(cfg.seed, STREAM_EXPERIMENT),
        k=cfg.metrics.k,
        click_scale=cfg.experiment.click_scale,
        click_bias=cfg.experiment.click_bias,
        target_ctr=cfg.experiment.target_ctr,
        pilot_impressions=cfg.experiment.pilot_impressions,
        position_exponent=cfg.experiment.position_exponent,
        mean_context_len=cfg.experiment.mean_context_len,
        max_context_len=cfg.experiment.max_context_len,
        override_pref=override,
    )
    absim.write_impressions(log, os.path.join(out_dir, IMPRESSIONS_FILE))
    kpis = absim.aggregate_kpis(log)
    with open(os.path.join(out_dir, KPIS_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("group,n,ctr,cvr,units_total\n")
        for kpi in kpis:
            cvr = "" if kpi.cvr is None else repr(kpi.cvr)
            fh.write(f"{kpi.group},{kpi.n},{repr(kpi.ctr)},{cvr},{kpi.units_total}\n")
    with open(os.path.join(out_dir, SIM_META_FILE), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    meta["kpis"] = [kpi.__dict__ for kpi in kpis]
    meta["impressions"] = os.path.join(out_dir, IMPRESSIONS_FILE)
    return meta


def analyze(cfg: RunConfig, out_dir: str, alpha: float | None = None) -> dict:
    """Regress online outcomes on offline metric changes and emit the report."""
    front_path = _require(out_dir, FRONT_FILE, "analyze")
    log_path = _require(out_dir, IMPRESSIONS_FILE, "analyze")
    alpha = cfg.alpha if alpha is None else alpha
    front = metrics.read_front(front_path)
    log = absim.read_impressions(log_path)
    results = stats.run_hypotheses(front, log, stats.DEFAULT_HYPOTHESES, alpha)
    stats.write_report(results, os.path.join(out_dir, REPORT_FILE))
    table = stats.render_table(results)
    with open(os.path.join(out_dir, REPORT_TEXT_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table)
    rows = stats.scatter_data(results, front, log)
    stats.write_scatter(rows, os.path.join(out_dir, SCATTER_FILE))
    for r in results:
        points = [(row[2], row[3], row[4]) for row in rows
                  if row[0] == r.spec.id and row[1] == "group"]
        curve = [(row[2], row[3]) for row in rows if row[0] == r.spec.id and row[1] == "curve"]
        svg = plots.render_scatter_svg(
            title=f"{r.spec.id}: {r.spec.predictor} vs. {r.spec.outcome}",
            x_label=f"{r.spec.predictor} change vs. worst group",
            y_label=f"{r.spec.outcome} rate",
            points=points, curve=curve)
        with open(os.path.join(out_dir, f"plot_{r.spec.id}.svg"), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(svg)
    return {
        "report": os.path.join(out_dir, REPORT_FILE),
        "table": table,
        "alpha": alpha,
        "rows": [
            {
                "hypothesis": r.spec.id,
                "predictor": r.spec.predictor,
                "outcome": r.spec.outcome,
                "coef": r.regression.coef,
                "se": r.regression.se,
                "z": r.regression.z,
                "p_value": r.regression.p_value,
                "ci_low": r.regression.ci_low,
                "ci_high": r.regression.ci_high,
                "n": r.regression.n,
                "significant": r.significant,
                "direction": r.direction,
                "matches_expected_sign": r.matches_expected_sign,
            }
            for r in results
        ],
    }


_STAGES = ("generate", "train", "eval-offline", "simulate", "analyze")


def run_pipeline(cfg: RunConfig, out_dir: str) -> dict:
    """All five stages in order; earlier outputs survive a later failure."""
    summary: dict = {}
    stage_fns = {
        "generate": generate,
        "train": train,
        "eval-offline": eval_offline,
        "simulate": simulate,
        "analyze": analyze,
    }
    for stage in _STAGES:
        try:
            summary[stage] = stage_fns[stage](cfg, out_dir)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage, str(exc)) from exc
    return summary
