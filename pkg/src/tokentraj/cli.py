"""Command-line pipeline: gen-data, train, rollout, eval, sweep-tau, plot.

All commands are deterministic given their flags and input files; flags,
exit codes and file schemas are documented in docs/MANUAL.md.  Exit code 2
marks usage errors, 1 runtime failures (missing files, bad data).
"""

from __future__ import annotations

import json
import sys
from concurrent.futures import ThreadPoolExecutor

import click

from .errors import TokenTrajError
from .metrics import EvalConfig, evaluate
from .scene import SCENE_KINDS, generate_scene, load_scenes, save_scenes


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _load_scenes_checked(path):
    try:
        return load_scenes(path)
    except FileNotFoundError:
        _fail(f"data file not found: {path}")
    except TokenTrajError as exc:
        _fail(str(exc))


def _load_predictions(path):
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    _fail(f"{path}: line {lineno}: invalid JSON ({exc})")
    except FileNotFoundError:
        _fail(f"predictions file not found: {path}")
    return records


def _write_predictions(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


@click.group()
def main():
    """Autoregressive multi-modal trajectory forecasting on synthetic scenes."""


@main.command("gen-data")
@click.option("--kind", type=click.Choice(SCENE_KINDS + ("mixed",)), required=True)
@click.option("--count", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--dt", type=float, default=0.2, show_default=True)
@click.option("--t-obs", type=int, default=10, show_default=True)
@click.option("--t-future", type=int, default=40, show_default=True)
def cmd_gen_data(kind, count, seed, out, dt, t_obs, t_future):
    """Generate a synthetic JSONL dataset."""
    if count < 0:
        raise click.BadParameter("--count must be >= 0")
    scenes = []
    for i in range(count):
        k = SCENE_KINDS[i % len(SCENE_KINDS)] if kind == "mixed" else kind
        scenes.append(generate_scene(k, seed + i, dt=dt, t_obs=t_obs, t_future=t_future))
    save_scenes(scenes, out)
    click.echo(f"wrote {len(scenes)} scenes to {out}")


@main.command("train")
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--log", "log_path", type=click.Path(), default=None)
@click.option("--max-steps", type=int, default=None, help="Cap optimizer steps (smoke runs).")
def cmd_train(data_path, config_path, out_path, log_path, max_steps):
    """Train a model; writes a checkpoint and an optional JSONL metrics log."""
    from .checkpoint import save_checkpoint
    from .training import TrainConfig, train

    scenes = _load_scenes_checked(data_path)
    config = TrainConfig()
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                config = TrainConfig.from_dict(json.load(fh))
        except FileNotFoundError:
            _fail(f"config file not found: {config_path}")
        except (json.JSONDecodeError, TokenTrajError) as exc:
            _fail(f"bad config {config_path}: {exc}")
    try:
        result = train(scenes, config, log_path=log_path, max_steps=max_steps)
    except TokenTrajError as exc:
        _fail(str(exc))
    save_checkpoint(out_path, result.model, result.anchors)
    last = result.history[-1] if result.history else {}
    click.echo(f"checkpoint written to {out_path} (final loss {last.get('total', 'n/a')})")


def _rollout_records(scenes, model, anchors, cfg, jobs):
    from .inference import rollout

    def run(scene):
        rows = []
        for pred in rollout(scene, model, anchors, cfg):
            rows.append(
                {
                    "scene_id": scene.scene_id,
                    "agent_id": pred.agent_id,
                    "modes": [
                        {"score": m.score, "waypoints": m.waypoints.tolist()}
                        for m in pred.modes
                    ],
                }
            )
        return rows

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_scene = list(pool.map(run, scenes))
    else:
        per_scene = [run(s) for s in scenes]
    return [row for rows in per_scene for row in rows]


@main.command("rollout")
@click.option("--checkpoint", "ckpt_path", type=click.Path(), required=True)
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--tau", type=float, default=0.5, show_default=True)
@click.option("--no-cache", is_flag=True, help="Recompute decoder features every step.")
@click.option("--independent", is_flag=True, help="Single-shot long-horizon decoding (ablation).")
@click.option("--nms-out", type=int, default=None, help="Keep this many modes after NMS.")
@click.option("--nms-threshold", type=float, default=2.0, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
def cmd_rollout(ckpt_path, data_path, out_path, tau, no_cache, independent, nms_out, nms_threshold, jobs):
    """Autoregressive multi-mode rollout; writes predictions JSONL."""
    from .checkpoint import load_checkpoint
    from .inference import RolloutConfig

    try:
        model, anchors = load_checkpoint(ckpt_path)
    except FileNotFoundError:
        _fail(f"checkpoint not found: {ckpt_path}")
    except TokenTrajError as exc:
        _fail(str(exc))
    scenes = _load_scenes_checked(data_path)
    cfg = RolloutConfig(
        tau=tau,
        use_cache=not no_cache,
        independent=independent,
        nms_out=nms_out,
        nms_threshold=nms_threshold,
    )
    try:
        records = _rollout_records(scenes, model, anchors, cfg, jobs)
    except TokenTrajError as exc:
        _fail(str(exc))
    _write_predictions(records, out_path)
    click.echo(f"wrote {len(records)} agent predictions to {out_path}")


@main.command("eval")
@click.option("--pred", "pred_path", type=click.Path(), required=True)
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--miss-threshold", type=float, default=2.0, show_default=True)
@click.option("--stride", type=int, default=1, show_default=True)
def cmd_eval(pred_path, data_path, out_path, miss_threshold, stride):
    """Score predictions against ground truth; writes a JSON report."""
    scenes = _load_scenes_checked(data_path)
    records = _load_predictions(pred_path)
    try:
        report = evaluate(
            scenes, records, EvalConfig(miss_threshold=miss_threshold, eval_stride=stride)
        )
    except TokenTrajError as exc:
        _fail(str(exc))
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_obj(), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    click.echo(
        f"minADE {report.min_ade:.3f}  minFDE {report.min_fde:.3f}  "
        f"MR {report.miss_rate:.3f}  mAP {report.map:.3f}"
    )


@main.command("sweep-tau")
@click.option("--checkpoint", "ckpt_path", type=click.Path(), required=True)
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--taus", type=str, default="0,0.5,1.0", show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
def cmd_sweep_tau(ckpt_path, data_path, out_path, taus, jobs):
    """Evaluate the fuse weighting exponent at several values; writes a table."""
    from .checkpoint import load_checkpoint
    from .inference import RolloutConfig

    try:
        tau_values = [float(t) for t in taus.split(",") if t.strip() != ""]
    except ValueError:
        raise click.BadParameter(f"--taus must be comma-separated floats, got {taus!r}")
    try:
        model, anchors = load_checkpoint(ckpt_path)
    except FileNotFoundError:
        _fail(f"checkpoint not found: {ckpt_path}")
    scenes = _load_scenes_checked(data_path)
    rows = []
    for tau in tau_values:
        records = _rollout_records(scenes, model, anchors, RolloutConfig(tau=tau), jobs)
        report = evaluate(scenes, records, EvalConfig())
        rows.append(
            {
                "tau": tau,
                "min_ade": report.min_ade,
                "min_fde": report.min_fde,
                "miss_rate": report.miss_rate,
                "map": report.map,
            }
        )
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump({"sweep": rows}, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    header = f"{'tau':>5}  {'mAP':>7}  {'minADE':>7}  {'minFDE':>7}  {'MR':>6}"
    click.echo(header)
    for row in rows:
        click.echo(
            f"{row['tau']:>5.2f}  {row['map']:>7.4f}  {row['min_ade']:>7.4f}  "
            f"{row['min_fde']:>7.4f}  {row['miss_rate']:>6.3f}"
        )


@main.command("plot")
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--scene-id", type=str, required=True)
@click.option("--pred", "pred_path", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_plot(data_path, scene_id, pred_path, out_path):
    """Render one scene (plus optional predictions) to SVG."""
    from .render import render_scene_svg

    scenes = _load_scenes_checked(data_path)
    matching = [s for s in scenes if s.scene_id == scene_id]
    if not matching:
        _fail(f"scene id {scene_id!r} not found in {data_path}")
    records = []
    if pred_path is not None:
        records = [r for r in _load_predictions(pred_path) if r["scene_id"] == scene_id]
    try:
        svg = render_scene_svg(matching[0], records)
    except TokenTrajError as exc:
        _fail(str(exc))
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(svg)
    click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
