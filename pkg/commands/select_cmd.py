import argparse

from cli import (
    EXIT_OK,
    Command,
    PglmmCli,
    add_data_arguments,
    add_model_arguments,
    add_selection_arguments,
)
from commands.fit_cmd import POSTERIOR_FILE
from core.sampler import write_posterior
from core.selection import select_model
from utils.exceptions import (
    ConstantColumn,
    DimensionMismatch,
    InvalidResponse,
    MissingColumn,
    PosteriorFileError,
)
from utils.reports import create_fit_report, create_selection_report
from utils.run_config import RunConfig


class SelectCommand(Command):
    name = "select"
    help = "Select fixed and random effects over a penalty grid."
    error_map = {
        MissingColumn: "A required column is missing from the data",
        ConstantColumn: "A covariate is constant and cannot be standardized",
        InvalidResponse: "The response does not fit the chosen family",
        PosteriorFileError: "The minimal-penalty posterior file is unusable",
        DimensionMismatch: "The saved posterior does not match this data",
    }

    def add_arguments(self, parser: argparse.ArgumentParser):
        add_data_arguments(parser)
        add_model_arguments(parser)
        add_selection_arguments(parser)

    def run(self, cfg: RunConfig) -> int:
        dataset, family = self.load_dataset(cfg)
        result = select_model(dataset, family, cfg.selection_config(dataset))
        best = result.best_entry
        self.logger.info(
            f"Selected lambda0={best.lambda0:.5g}, lambda1={best.lambda1:.5g} by {result.criterion}"
        )

        manager = self.data_manager(cfg)
        manager.write_json(create_selection_report(result, family), "selection.json")
        manager.write_json(create_fit_report(best.fit, result.dataset, family, best.criteria), "fit_report.json")
        if best.fit.draws is not None:
            write_posterior(best.fit.draws, manager.path(POSTERIOR_FILE), seed=cfg.seed)
        return EXIT_OK


def setup(cli: PglmmCli):
    cli.add_command(SelectCommand(cli))
