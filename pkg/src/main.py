import argparse, logging, os, sys, time

from dotenv import load_dotenv

from depth_renderer import render_depth, write_pgm
from geopredict_architecture import AblationSwitch, format_record
from geopredict_model import GAUSSIAN_SOURCES, make_window
from gradcheck import SCOPES, run_gradcheck
from run_config import ABLATION_PRESETS, RunConfig
from synth_env import generate_dataset, load_dataset, read_episode
from trainer import create_train_state, evaluate, load_train_state, save_train_state, train

load_dotenv()

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
PRESETS = {"tiny": RunConfig.tiny, "toy": RunConfig.toy, "full_scale": RunConfig.full_scale}

logger = logging.getLogger("geopredict")
metrics_logger = logging.getLogger("geopredict.metrics")


def configure_logging(log_file=None):
    level = os.getenv("GEOPREDICT_LOG_LEVEL", "INFO").upper()
    handlers = [logging.StreamHandler(sys.stderr)]
    log_file = log_file or os.getenv("GEOPREDICT_LOG_FILE")
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def emit(record):
    """Metrics go to stdout and, through the metrics logger, to the log file."""
    line = record if isinstance(record, str) else format_record(record)
    print(line, flush=True)
    metrics_logger.info(line)


def load_config(value):
    if value is None:
        return RunConfig.toy()
    if value in PRESETS:
        return PRESETS[value]()
    return RunConfig.from_file(value)


def build_parser():
    parser = argparse.ArgumentParser(description="GeoPredict: geometry-predictive action policy on a synthetic arm")
    parser.add_argument("--log-file", help="Also write log output (and metric records) to this file")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate scripted pick-and-place episodes")
    gen.add_argument("--episodes", type=int, required=True, help="Number of episodes")
    gen.add_argument("--seed", type=int, required=True, help="Seed of episode 0 (episode i uses seed + i)")
    gen.add_argument("--out", required=True, help="Dataset directory")
    gen.add_argument("--config", help="Run config file or preset name (horizon, image size, cameras)")

    tr = commands.add_parser("train", help="Train a model and save a checkpoint")
    tr.add_argument("--config", help="Run config file or preset name (default: toy)")
    tr.add_argument("--data", required=True, help="Dataset directory")
    tr.add_argument("--out", required=True, help="Checkpoint directory")
    tr.add_argument("--iterations", type=int, help="Override the configured iteration count")

    ev = commands.add_parser("eval", help="Evaluate a checkpoint on held-out episodes")
    ev.add_argument("--checkpoint", required=True, help="Checkpoint directory")
    ev.add_argument("--data", required=True, help="Dataset directory")

    rd = commands.add_parser("render-depth", help="Render predicted depth for one future step to a 16-bit PGM")
    rd.add_argument("--checkpoint", required=True, help="Checkpoint directory")
    rd.add_argument("--episode", required=True, help="Episode directory")
    rd.add_argument("--step", type=int, required=True, help="Future step tau in [0, H]")
    rd.add_argument("--out", required=True, help="Output PGM path")
    rd.add_argument("--camera", type=int, default=0, help="Camera index (default: 0)")
    rd.add_argument("--window-start", type=int, default=0, help="Current step t of the window (default: 0)")
    rd.add_argument("--gaussians", choices=GAUSSIAN_SOURCES, default="total", help="Render G_init or G_total")

    gc = commands.add_parser("gradcheck", help="Compare analytic gradients with finite differences")
    gc.add_argument("--scope", choices=SCOPES, required=True)
    gc.add_argument("--seed", type=int, default=0)

    ab = commands.add_parser("ablate", help="Train and evaluate with pathways switched off")
    ab.add_argument(
        "--disable",
        action="append",
        default=[],
        choices=[switch.value for switch in AblationSwitch],
        help="Pathway to disable (repeatable)",
    )
    ab.add_argument("--preset", choices=list(ABLATION_PRESETS), help="Component-ablation column")
    ab.add_argument("--config", help="Run config file or preset name (default: toy)")
    ab.add_argument("--data", required=True, help="Dataset directory")
    ab.add_argument("--iterations", type=int, help="Override the configured iteration count")
    ab.add_argument("--out", help="Optional checkpoint directory")
    return parser


def cmd_gen_data(args):
    config = load_config(args.config)
    paths = generate_dataset(
        args.out, args.episodes, args.seed, config.horizon, config.image_size, config.num_cameras
    )
    emit({"command": "gen-data", "episodes": len(paths), "seed": args.seed, "out": args.out})


def cmd_train(args):
    config = load_config(args.config)
    episodes = load_dataset(args.data)
    state = create_train_state(config, episodes[0].proprio.shape[-1])
    train(state, episodes, args.iterations, on_record=emit)
    save_train_state(args.out, state)
    logger.info(f"Checkpoint written to {args.out}")


def cmd_eval(args):
    state = load_train_state(args.checkpoint)
    metrics = evaluate(state.model, load_dataset(args.data), state.config)
    emit(metrics.to_record())


def cmd_render_depth(args):
    state = load_train_state(args.checkpoint)
    episode = read_episode(args.episode)
    if not 0 <= args.camera < len(episode.cameras):
        raise ValueError(f"camera {args.camera} outside 0..{len(episode.cameras) - 1}")
    batch = make_window(episode, args.window_start, state.config).to(state.config.torch_dtype)
    gaussians = state.model.predict_gaussians(batch, args.step, args.gaussians)[0]
    camera = episode.cameras[args.camera]
    depth = render_depth(gaussians, camera, state.config.render_settings).detach()
    write_pgm(args.out, depth)
    emit(
        {
            "command": "render-depth",
            "step": args.step,
            "camera": args.camera,
            "gaussians": args.gaussians,
            "num_gaussians": len(gaussians),
            "out": args.out,
        }
    )


def cmd_gradcheck(args):
    report = run_gradcheck(args.scope, args.seed)
    emit(report.to_record())
    if not report.passed:
        logger.error(f"Gradient check '{args.scope}' failed: {report.failures}/{report.checked} entries")
        sys.exit(1)


def cmd_ablate(args):
    config = load_config(args.config)
    if args.preset:
        config = config.with_ablation_preset(args.preset)
    config = config.with_disabled(*(AblationSwitch(value) for value in args.disable))
    disabled = ",".join(config.disabled_pathways()) or "none"
    logger.info(f"Ablation run: disabled pathways: {disabled}")
    episodes = load_dataset(args.data)
    state = create_train_state(config, episodes[0].proprio.shape[-1])

    def on_record(record):
        record["disabled"] = disabled
        emit(record)

    train(state, episodes, args.iterations, on_record=on_record)
    metrics = evaluate(state.model, episodes, config)
    emit(format_record(metrics.to_dict(), prefix=f"disabled={disabled}"))
    if args.out:
        save_train_state(args.out, state)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "render-depth": cmd_render_depth,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None):
    start_time = time.time()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_file)
    try:
        COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        sys.exit(1)
    logger.info(f"Total execution time: {time.time() - start_time:.4f} seconds")


if __name__ == "__main__":
    main()
