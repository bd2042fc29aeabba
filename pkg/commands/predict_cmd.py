import argparse

from cli import EXIT_OK, Command, PglmmCli
from core.inference import LINK, RESPONSE, predict_from_coefficients
from core.model_core import INTERCEPT_NAME, family_from_name
from utils.exceptions import InputError, MissingColumn
from utils.run_config import RunConfig


class PredictCommand(Command):
    name = "predict"
    help = "Apply a saved fit report's fixed effects to new data."
    error_map = {
        MissingColumn: "A covariate used by the fit is missing from the new data",
    }

    def add_arguments(self, parser: argparse.ArgumentParser):
        parser.add_argument("--report", help="fit_report.json written by fit or select")
        parser.add_argument("--data", help="CSV with the fitted covariates")
        parser.add_argument("--type", choices=[LINK, RESPONSE])

    def run(self, cfg: RunConfig) -> int:
        if not cfg.report or not cfg.data:
            raise InputError("predict needs --report and --data")
        manager = self.data_manager(cfg)
        report = manager.read_json(cfg.report)
        try:
            names = report["data"]["covariates"]
            raw = report["fixef_raw"]
            family = family_from_name(report["family"])
            beta = [raw[name] or 0.0 for name in [INTERCEPT_NAME] + names]
        except (KeyError, TypeError) as e:
            raise InputError(f"{cfg.report} is not a fit report: missing {e}") from e

        X = manager.covariate_matrix(manager.load_frame(cfg.data), names)
        predictions = predict_from_coefficients(beta, X, family, cfg.type)
        manager.write_predictions(predictions)
        return EXIT_OK


def setup(cli: PglmmCli):
    cli.add_command(PredictCommand(cli))
