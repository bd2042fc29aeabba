import argparse

from cli import EXIT_OK, Command, PglmmCli
from core.inference import mcmc_diagnostics
from core.sampler import read_posterior
from utils.exceptions import InputError, PosteriorFileError, UnknownSeriesName
from utils.run_config import RunConfig


class DiagnoseCommand(Command):
    name = "diagnose"
    help = "Write sample paths, autocorrelations, cumulative sums and histograms of saved draws."
    error_map = {
        PosteriorFileError: "Cannot read the posterior file",
        UnknownSeriesName: "Unknown group or variable requested",
    }

    def add_arguments(self, parser: argparse.ArgumentParser):
        parser.add_argument("--posterior", help="PGLMPOST1 file written by fit or select")
        parser.add_argument("--grps", nargs="+", help="group labels, default all")
        parser.add_argument("--vars", nargs="+", help="random-effect names, default all")
        parser.add_argument("--max-lag", dest="max_lag", type=int)
        parser.add_argument("--bins", type=int)

    def run(self, cfg: RunConfig) -> int:
        if not cfg.posterior:
            raise InputError("diagnose needs --posterior")
        draws = read_posterior(cfg.posterior)
        series = mcmc_diagnostics(draws, cfg.grps, cfg.vars, cfg.max_lag, cfg.bins)
        self.logger.info(f"Diagnostics for {len(series.series)} (group, variable) series")
        self.data_manager(cfg).write_diagnostics(series)
        return EXIT_OK


def setup(cli: PglmmCli):
    cli.add_command(DiagnoseCommand(cli))
