import argparse

from cli import EXIT_OK, Command, PglmmCli, add_data_arguments, add_model_arguments
from core.inference import residuals
from core.mcecm import fit_single
from core.sampler import write_posterior
from core.selection import compute_criteria
from utils.exceptions import (
    ConstantColumn,
    InsufficientGroups,
    InvalidResponse,
    MissingColumn,
    MStepDivergence,
)
from utils.reports import create_fit_report
from utils.run_config import RunConfig

POSTERIOR_FILE = "posterior.pglmpost"


class FitCommand(Command):
    name = "fit"
    help = "Fit one penalized GLMM at a fixed (lambda0, lambda1) pair, unpenalized by default."
    error_map = {
        MissingColumn: "A required column is missing from the data",
        ConstantColumn: "A covariate is constant and cannot be standardized",
        InvalidResponse: "The response does not fit the chosen family",
        InsufficientGroups: "Too few groups to estimate random-effect variances",
        MStepDivergence: "The coefficient updates diverged",
    }

    def add_arguments(self, parser: argparse.ArgumentParser):
        add_data_arguments(parser)
        add_model_arguments(parser)
        parser.add_argument("--lambda0", type=float, help="fixed-effect penalty, default 0")
        parser.add_argument("--lambda1", type=float, help="random-effect penalty, default 0")
        parser.add_argument("--came-m-star", dest="came_m_star", type=int)

    def run(self, cfg: RunConfig) -> int:
        dataset, family = self.load_dataset(cfg)
        selection = cfg.selection_config(dataset)
        fit = fit_single(dataset, family, selection.penalty, selection.fit, selection.sampler)
        criteria = compute_criteria(fit, dataset, family, None, selection)

        manager = self.data_manager(cfg)
        manager.write_json(create_fit_report(fit, dataset, family, criteria), "fit_report.json")
        write_posterior(fit.draws, manager.path(POSTERIOR_FILE), seed=cfg.seed)
        kind = "pearson" if family.has_dispersion else "deviance"
        manager.write_residuals(residuals(fit, dataset, family, kind), dataset, kind)
        return EXIT_OK


def setup(cli: PglmmCli):
    cli.add_command(FitCommand(cli))
