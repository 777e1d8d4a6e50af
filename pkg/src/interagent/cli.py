"""Command-line pipeline: collect -> train -> rollout -> react -> eval."""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import diffusion as dfn
from . import evalphys
from . import tracking as tr
from . import training as trn
from .config import Config, load_config
from .errors import ConfigError, DataError, InterAgentError
from .formats import Checkpoint, DatasetFile, episode_from_record, episode_from_trajectory
from .simworld import SimState, standing_agent

log = logging.getLogger("interagent")


# ---------------------------------------------------------------------------
# commands


def cmd_collect(config: Config, out=None) -> DatasetFile:
    spec = config.body_spec()
    mc = config.model_config()
    motions = [tr.gen_reference(name, config.episode_length, [config.seed, i, k], spec)
               for i, name in enumerate(config.scenario_list())
               for k in range(config.motions_per_scenario)]
    kept, rejected = tr.collect_dataset(motions, spec, config.sigma, config.rollouts_per_motion,
                                        config.keep, config.seed, config.success_threshold)
    if not kept:
        raise DataError(f"no successful episodes out of {len(rejected)} attempts")
    ds = DatasetFile.for_body(spec, mc.extero, mc.d_p, mc.d_e, digest=config.digest())
    ds.episodes = [episode_from_record(ep, spec, mc.extero) for ep in kept]
    ds.save(config.dataset)
    out = out or sys.stdout
    frames = sum(ep.length for ep in ds.episodes)
    reward = float(np.mean([ep.mean_reward for ep in kept]))
    print(f"episodes\t{len(kept)}\nrejected\t{len(rejected)}\nframes\t{frames}\n"
          f"mean_ig_reward\t{reward!r}\nwrote\t{config.dataset}", file=out)
    return ds


def cmd_train(config: Config, resume: bool = False, out=None) -> trn.TrainState:
    ds = DatasetFile.load(config.dataset)
    mc = config.model_config()
    if (ds.J, ds.dof, ds.kind) != (mc.J, mc.dof, mc.extero):
        raise DataError(f"dataset is J={ds.J}, dof={ds.dof}, {ds.kind}; config wants "
                        f"J={mc.J}, dof={mc.dof}, {mc.extero}")
    if resume and Path(config.checkpoint).exists():
        state = trn.state_from_checkpoint(Checkpoint.load(config.checkpoint), config)
        log.info("resuming from step %d", state.step)
    else:
        state = trn.init_state(config, trn.dataset_stats(ds))
    windows = trn.build_windows(ds, mc, state.stats)
    rows = trn.train(state, windows, checkpoint_path=config.checkpoint, log_path=config.loss_log)
    out = out or sys.stdout
    if rows:
        print(f"steps\t{state.step}\nfirst_loss\t{rows[0][1]!r}\nfinal_loss\t{rows[-1][1]!r}\n"
              f"wrote\t{config.checkpoint}", file=out)
    return state


def load_policy(config: Config) -> dfn.Policy:
    ck = Checkpoint.load(config.checkpoint)
    if ck.digest != config.digest():
        raise ConfigError(f"{config.checkpoint} was trained with a different configuration "
                          "(config digest mismatch); pass the same profile and model settings")
    state = trn.state_from_checkpoint(ck, config)
    schedule = dfn.make_schedule(config.diffusion_steps, config.schedule)
    return dfn.Policy(state.params, state.stats, schedule, config.body_spec(), config.sampler)


def initial_state(config: Config, gap: float = 1.0) -> SimState:
    spec = config.body_spec()
    return SimState((standing_agent(spec, -gap / 2, 0.0, 0.0), standing_agent(spec, gap / 2, 0.0, np.pi)))


def _write_dump(config: Config, command: str, traj: dfn.Trajectory) -> DatasetFile:
    spec, mc = config.body_spec(), config.model_config()
    ds = DatasetFile.for_body(spec, mc.extero, mc.d_p, mc.d_e, guidance=config.guidance,
                              digest=config.digest())
    ds.episodes = [episode_from_trajectory(command, traj, spec, mc.extero)]
    ds.save(config.output)
    return DatasetFile.load(config.output)  # report on exactly what was written


def cmd_rollout(config: Config, command: str, out=None) -> DatasetFile:
    policy = load_policy(config)
    traj = dfn.rollout(policy, initial_state(config), command, config.rollout_steps, config.guidance,
                       config.seed, config.rollout_mode)
    ds = _write_dump(config, command, traj)
    write_report(ds, Path(str(config.output) + ".metrics"), out)
    return ds


def cmd_react(config: Config, fixed_path: str, command: str, episode: int = 0, out=None) -> DatasetFile:
    """Agent 1 replays episode ``episode`` of the fixed file; agent 2 is generated."""
    fixed = DatasetFile.load(fixed_path)
    if not 0 <= episode < len(fixed.episodes):
        raise DataError(f"{fixed_path} has {len(fixed.episodes)} episodes, asked for #{episode}")
    policy = load_policy(config)
    if (fixed.J, fixed.dof, fixed.d_p) != (policy.cfg.J, policy.cfg.dof, policy.cfg.d_p):
        raise DataError("fixed trajectory was recorded for a different body")
    ep = fixed.episodes[episode]
    if ep.length < 1:
        raise DataError("fixed trajectory is empty")
    steps = min(config.rollout_steps, ep.length)
    replay = fixed.states(ep)
    start = SimState((replay[0].agents[0], replay[0].agents[1]))
    traj = dfn.rollout(policy, start, command, steps, config.guidance, config.seed, config.rollout_mode,
                       replay=replay, replay_proprio=ep.xp[0])
    ds = _write_dump(config, command, traj)
    write_report(ds, Path(str(config.output) + ".metrics"), out)
    return ds


def evaluate_dump(ds: DatasetFile) -> dict[str, evalphys.TrajMetrics]:
    """Metrics per agent and over both agents of every episode, frames concatenated."""
    per = {"agent1": [], "agent2": [], "combined": []}
    for ep in ds.episodes:
        joints, sites, feet, contact = ds.joints(ep), ds.sites(ep), ds.feet(ep), ds.contacts(ep)
        for i, key in enumerate(("agent1", "agent2")):
            per[key].append(evalphys.evaluate(joints[i], sites[i], feet[i], contact[i]))
        cat = [np.concatenate([x[0], x[1]], axis=1) for x in (joints, sites, feet, contact)]
        per["combined"].append(evalphys.evaluate(*cat))
    if not ds.episodes:
        raise DataError("dump holds no episodes")
    return {k: evalphys.TrajMetrics(*(float(np.mean([getattr(m, f) for m in v]))
                                      for f in ("floating", "skating", "jerk")))
            for k, v in per.items()}


def format_report(metrics: dict[str, evalphys.TrajMetrics]) -> str:
    lines = [f"{who}.{name} = {val!r}" for who, m in metrics.items() for name, val in m.as_dict().items()]
    lines += ["", "who\tfloating_mm\tskating_mm\tjerk_mm"]
    lines += [f"{who}\t{m.floating!r}\t{m.skating!r}\t{m.jerk!r}" for who, m in metrics.items()]
    return "\n".join(lines) + "\n"


def write_report(ds: DatasetFile, path: Path | None, out=None) -> dict[str, evalphys.TrajMetrics]:
    metrics = evaluate_dump(ds)
    text = format_report(metrics)
    out = out or sys.stdout
    if path is not None:
        path.write_text(text)
    out.write(text)
    return metrics


def cmd_eval(path: str, out=None) -> dict[str, evalphys.TrajMetrics]:
    return write_report(DatasetFile.load(path), None, out)


# ---------------------------------------------------------------------------
# argument parsing


def _config_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("configuration (override the profile and config file)")
    g.add_argument("--config", help="flat key = value config file")
    g.add_argument("--profile", default=None, choices=["paper", "desk"], help="built-in defaults (paper)")
    for f in fields(Config):
        kind = type(f.default)
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=kind, default=None,
                       metavar=kind.__name__.upper(), help=f"{f.metadata['doc']} (default {f.default})")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS for bit-reproducible outputs")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="interagent", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)
    c = sub.add_parser("collect", help="track procedural references and write a dataset file")
    _config_flags(c)
    t = sub.add_parser("train", help="train the diffusion policy on a dataset file")
    _config_flags(t)
    t.add_argument("--resume", action="store_true", help="continue from --checkpoint if it exists")
    r = sub.add_parser("rollout", help="closed-loop generation of both agents")
    _config_flags(r)
    r.add_argument("--command", dest="text", default=tr.SCENARIOS["handshake"], help="text command")
    x = sub.add_parser("react", help="agent 1 replays a file, agent 2 responds")
    _config_flags(x)
    x.add_argument("fixed", help="dataset or trajectory file holding agent 1's motion")
    x.add_argument("--command", dest="text", default=tr.SCENARIOS["handshake"], help="text command")
    x.add_argument("--episode", type=int, default=0, help="episode of the fixed file to replay")
    e = sub.add_parser("eval", help="physical-plausibility report of a trajectory file")
    e.add_argument("dump")
    return p


def config_from_args(args) -> Config:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.profile is not None:
        overrides["profile"] = args.profile
    return load_config(args.config, "paper", overrides)


def run(args) -> None:
    if args.cmd == "eval":
        cmd_eval(args.dump)
        return
    config = config_from_args(args)
    limits = threadpool_limits(1) if args.deterministic else contextlib.nullcontext()
    with limits:
        if args.cmd == "collect":
            cmd_collect(config)
        elif args.cmd == "train":
            cmd_train(config, args.resume)
        elif args.cmd == "rollout":
            cmd_rollout(config, args.text)
        elif args.cmd == "react":
            cmd_react(config, args.fixed, args.text, args.episode)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (InterAgentError, OSError) as exc:
        print(f"interagent {args.cmd}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
