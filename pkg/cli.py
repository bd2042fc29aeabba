import argparse
import importlib
import logging
import os

from core.model_core import Dataset, FamilySpec, family_from_name
from utils.data_manager import DataManager
from utils.exceptions import InputError, PglmmError
from utils.run_config import RunConfig

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_INPUT = 2

COMMANDS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "commands")


def exit_code_for(error: Exception) -> int:
    if isinstance(error, InputError):
        return EXIT_INPUT
    return EXIT_NUMERICAL


def _float_or_word(value: str):
    try:
        return float(value)
    except ValueError:
        return value


class Command:
    """
    Base class for a CLI verb.

    Subclasses set name/help, declare their flags in add_arguments and do the
    work in run, returning an exit code. error_map turns known exceptions into
    a short message for the log.
    """

    name = ""
    help = ""
    error_map: dict[type, str] = {}

    def __init__(self, cli: "PglmmCli"):
        self.cli = cli
        self.logger = logging.getLogger(type(self).__module__)

    def add_arguments(self, parser: argparse.ArgumentParser):
        pass

    def run(self, cfg: RunConfig) -> int:
        raise NotImplementedError

    def data_manager(self, cfg: RunConfig) -> DataManager:
        return DataManager(cfg.out)

    def load_dataset(self, cfg: RunConfig) -> tuple[Dataset, FamilySpec]:
        if not cfg.data:
            raise InputError(f"'{self.name}' needs --data")
        family = family_from_name(cfg.family)
        manager = self.data_manager(cfg)
        dataset = manager.build_dataset(manager.load_frame(cfg.data), cfg.roles(), family)
        self.logger.info(
            f"Dataset: N={dataset.N}, p={dataset.p}, K={dataset.K}, q={dataset.q} ({family.kind})"
        )
        return dataset, family

    def execute(self, cfg: RunConfig) -> int:
        try:
            return self.run(cfg)
        except Exception as error:
            return self.handle_error(error)

    def handle_error(self, error: Exception) -> int:
        for error_type, message in self.error_map.items():
            if isinstance(error, error_type):
                self.logger.error(f"{message}: {error}")
                return exit_code_for(error)
        if isinstance(error, PglmmError):
            self.logger.error(f"{self.name} failed: {error}")
            return exit_code_for(error)
        self.logger.error(f"An unhandled error occurred in {self.name}: {error}", exc_info=True)
        return EXIT_NUMERICAL


# Shared flag groups. Defaults are suppressed so only flags the user gives
# override the config document.


def add_common_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON document with run settings")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)


def add_data_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--data", help="input CSV")
    parser.add_argument("--response")
    parser.add_argument("--group")
    parser.add_argument("--covariates", nargs="+", help="covariate columns, default all remaining")
    parser.add_argument("--random", nargs="+", help="random-effect columns, 'all' or 'none'")
    parser.add_argument("--family", choices=["binomial", "gaussian", "poisson"])


def add_model_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--covar", choices=["auto", "unstructured", "diagonal", "independent"])
    parser.add_argument("--penalty", choices=["MCP", "SCAD", "lasso"])
    parser.add_argument("--gamma-scale", dest="gamma_scale", type=float)
    parser.add_argument("--alpha", type=float, help="elastic-net mixing in (0, 1]")
    parser.add_argument("--fixef-nopen", dest="fixef_nopen", nargs="+", help="unpenalized covariates")
    parser.add_argument("--sampler", choices=["adaptive_rw", "independence"])
    parser.add_argument("--nmc-burnin", dest="nmc_burnin", type=int)
    parser.add_argument("--nmc-start", dest="nmc_start", type=int)
    parser.add_argument("--nmc-max", dest="nmc_max", type=int)
    parser.add_argument("--nmc-report", dest="nmc_report", type=int)
    parser.add_argument("--var-start", dest="var_start", type=_float_or_word)
    parser.add_argument("--conv-em", dest="conv_em", type=float)
    parser.add_argument("--t-lag", dest="t_lag", type=int)
    parser.add_argument("--mcc", type=int)
    parser.add_argument("--maxit-em", dest="maxit_em", type=int)
    parser.add_argument("--conv-cd", dest="conv_cd", type=float)
    parser.add_argument("--maxit-cd", dest="maxit_cd", type=int)


def add_selection_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--search", choices=["abbrev", "full_grid"])
    parser.add_argument("--bic-option", dest="bic_option", choices=["BICq", "BICh", "BIC", "BICNgrp"])
    parser.add_argument("--no-pre-screen", dest="pre_screen", action="store_false")
    parser.add_argument("--lambda-min-presc", dest="lambda_min_presc", type=float)
    parser.add_argument("--lambda-min-ratio", dest="lambda_min_ratio", type=float)
    parser.add_argument("--nlambda", type=int)
    parser.add_argument("--lambda0-seq", dest="lambda0_seq", nargs="+", type=float)
    parser.add_argument("--lambda1-seq", dest="lambda1_seq", nargs="+", type=float)
    parser.add_argument("--came-m-star", dest="came_m_star", type=int)
    parser.add_argument("--posterior", help="minimal-penalty posterior file, reused when it exists")


def _single_word(values):
    if isinstance(values, list) and len(values) == 1 and values[0] in ("all", "none"):
        return values[0]
    return values


class PglmmCli:
    """Owns the argument parser and dispatches to the loaded commands."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.parser = argparse.ArgumentParser(
            prog="pglmm", description="Penalized GLMM fitting and variable selection."
        )
        self.subparsers = self.parser.add_subparsers(dest="verb", required=True)
        self.commands: dict[str, Command] = {}
        self.load_commands()

    def add_command(self, command: Command):
        parser = self.subparsers.add_parser(
            command.name, help=command.help, argument_default=argparse.SUPPRESS
        )
        add_common_arguments(parser)
        command.add_arguments(parser)
        self.commands[command.name] = command

    def load_commands(self):
        """Imports every module under commands/ and calls its setup hook."""
        for filename in sorted(os.listdir(COMMANDS_DIR)):
            if filename.endswith(".py") and not filename.startswith("__"):
                module = importlib.import_module(f"commands.{filename[:-3]}")
                module.setup(self)
                self.logger.debug(f"Loaded command module: {filename}")

    def parse(self, argv=None) -> RunConfig:
        args = vars(self.parser.parse_args(argv))
        verb = args.pop("verb")
        config_path = args.pop("config", None)
        for key in ("covariates", "random", "grps", "vars"):
            if key in args:
                args[key] = _single_word(args[key])
        return RunConfig.from_sources(verb, args, config_path)

    def run(self, argv=None) -> int:
        try:
            cfg = self.parse(argv)
        except PglmmError as e:
            self.logger.error(f"Invalid configuration: {e}")
            return exit_code_for(e)
        command = self.commands[cfg.verb]
        self.logger.info(f"Running '{cfg.verb}' with seed={cfg.seed}, threads={cfg.threads}")
        code = command.execute(cfg)
        if code == EXIT_OK:
            self.logger.info(f"'{cfg.verb}' finished")
        return code
