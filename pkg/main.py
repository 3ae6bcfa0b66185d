import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

from commands import RetargetApp
from config import load_config
from errors import exit_code_for

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

COMMANDS = {
    "synth": "generate the synthetic train/test demonstration sets",
    "train": "train encoder and decoder, write a checkpoint and loss curve",
    "retarget": "retarget demonstrations into robot joint trajectories",
    "eval": "tracking, velocity and acceleration errors and collisions per motion",
    "compare-init": "loss curves of latent optimisation from each initialisation",
    "ablate": "train and evaluate the architecture/activation/mode grid",
    "gradcheck": "finite-difference check of every differentiable component",
}

# (flag, config key, type, help)
FLAGS = [
    ("--robot", "robot", str, "robot description file (.robot)"),
    ("--demos", "demos", str, "demonstration file or directory (defaults to the synthetic test set)"),
    ("--train-demos", "train_demos", str, "training demonstration file or directory"),
    ("--checkpoint", "checkpoint", str, "trained network checkpoint (.npz)"),
    ("--trajectories", "trajectories", str, "evaluate saved trajectory CSVs instead of retargeting"),
    ("--output-dir", "output_dir", str, "root directory for run outputs"),
    ("--seed", "seed", int, "random seed"),
    ("--jobs", "jobs", int, "worker processes for per-motion work"),
    ("--log-level", "log_level", str, "logging level"),
    ("--mode", "mode", str, "feedforward or latent_opt"),
    ("--init", "init", str, "latent initialisation: neural, random or stats"),
    ("--sigma", "sigma", float, "standard deviation of the random latent init"),
    ("--chunk", "chunk", int, "frames per optimisation batch"),
    ("--frame-limit", "frame_limit", int, "keep only the first N frames of every motion"),
    ("--architecture", "architecture", str, "graph or dense"),
    ("--activation", "activation", str, "hidden activation"),
    ("--bound", "bound", str, "output bound: tanh or sigmoid"),
    ("--d-z", "d_z", int, "latent width per robot joint"),
    ("--n-train", "n_train", int, "synthetic training sequences"),
    ("--n-test", "n_test", int, "synthetic test sequences"),
    ("--frame-min", "frame_min", int, "shortest synthetic sequence"),
    ("--frame-max", "frame_max", int, "longest synthetic sequence"),
    ("--difficulty", "difficulty", float, "synthetic motion speed factor"),
    ("--style", "style", str, "synthetic motion style: sign or crossing"),
    ("--dt", "dt", float, "synthetic frame period in seconds"),
    ("--compare-variances", "compare_variances", str, "comma-separated random-init variances"),
    ("--ablate-architectures", "ablate_architectures", str, "comma-separated architectures"),
    ("--ablate-activations", "ablate_activations", str, "comma-separated activations"),
    ("--ablate-modes", "ablate_modes", str, "comma-separated modes"),
    ("--gradcheck-seeds", "gradcheck_seeds", int, "random points per component"),
    ("--gradcheck-tolerance", "gradcheck_tolerance", float, "maximum relative gradient error"),
    ("--w-ee", "weights.ee", float, "end-effector weight"),
    ("--w-ori", "weights.ori", float, "orientation weight"),
    ("--w-elb", "weights.elb", float, "elbow weight"),
    ("--w-fin", "weights.fin", float, "finger weight"),
    ("--w-col", "weights.col", float, "collision weight"),
    ("--w-lim", "weights.lim", float, "soft joint-limit weight (joint-space baseline)"),
    ("--prior-sigma", "weights.sigma", float, "latent prior scale"),
    ("--max-iters", "optim.max_iters", int, "latent optimisation iteration cap"),
    ("--plateau", "optim.plateau", int, "stop after this many iterations without improvement"),
    ("--optim-lr", "optim.lr", float, "latent optimisation learning rate"),
    ("--batch", "train.batch", int, "training batch size"),
    ("--lr", "train.lr", float, "training learning rate"),
    ("--epochs", "train.epochs", int, "training epochs"),
    ("--clip", "train.clip", float, "gradient norm clip"),
    ("--patience", "train.patience", int, "early-exit patience in epochs"),
    ("--objective", "train.objective", str, "training objective: fk or supervised"),
    ("--frame-stride", "train.frame_stride", int, "use every n-th training frame"),
]
SWITCHES = [
    ("--warm-start", "warm_start", "start each frame from the previous frame's latent"),
    ("--bidirectional", "bidirectional", "add reverse edges to the skeleton graphs"),
    ("--ablate-supervised", "ablate_supervised", "add the supervised objective to the ablation grid"),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retarget", description="Neural latent optimisation motion retargeting")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        command = sub.add_parser(name, help=text, description=text)
        command.add_argument("--config", dest="config_file", help="JSON config file")
        for flag, key, kind, text in FLAGS:
            command.add_argument(flag, dest=key, type=kind, default=None, help=text)
        for flag, key, text in SWITCHES:
            command.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=text)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config_file")}
    # Enable logging
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=logging.INFO
    )
    try:
        config = load_config(args.config_file, overrides)
        logging.getLogger().setLevel(config.log_level.upper())
        app = RetargetApp(config)
        handler = getattr(app, "cmd_" + args.command.replace("-", "_"))
        logger.info(f"Running '{args.command}' (config {config.config_hash()[:12]})")
        return handler()
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"'{args.command}' failed: {e}", exc_info=True)
        return code


if __name__ == '__main__':
    sys.exit(main())
