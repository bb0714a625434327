import json
import logging
import operator
import os
import traceback
from typing import Annotated, Any, Dict, List, Optional, Tuple

import numpy as np
from langgraph.graph import END, StateGraph
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm
from typing_extensions import TypedDict

from attacks import AttackConfig, robust_accuracy
from certificates import (
    ThreatModel,
    certified_accuracy_curve,
    certify_dataset,
    dual_norm_bound_report,
    margin_report,
    norm_label,
    operator_norm_diagnostics,
    sensitivity_bound,
)
from config import ExperimentConfig
from datasets import CenteringInfo, LabeledDataset, center, load_cifar_dir, load_mnist_dir, make_blobs
from errors import ConfigError, SpcrError
from heads import AnyHead, Classifier, LinearHead, TrainLog, fit_linear_head, lipschitz_upper_bound, train_mlp
from persistence import save_model
from projection import ProjectionModel, fit_pca, fit_spca, project, sparsity_report
from report_formatter import ResultRow, write_certificate_csv, write_csv

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
CELL_FAILURES = (SpcrError, ArithmeticError)


def banner(title: str) -> None:
    logger.info("=" * 50)
    logger.info(title)
    logger.info("=" * 50)


def load_datasets(config: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    """Train and test splits for ``config.dataset``, before any subsetting."""
    if config.dataset == "mnist":
        if not config.mnist_dir:
            raise ConfigError("dataset=mnist needs mnist_dir (or the MNIST_DIR environment variable)")
        return load_mnist_dir(config.mnist_dir)
    if config.dataset == "cifar-binary":
        if not config.cifar_dir:
            raise ConfigError("dataset=cifar-binary needs cifar_dir (or the CIFAR_DIR environment variable)")
        return load_cifar_dir(config.cifar_dir)
    return make_blobs(config.blobs_train, config.blobs_test, side=config.blobs_side,
                      classes=config.blobs_classes, seed=config.seed)


def fit_projection(config: ExperimentConfig, kind: str, r: int, X_centered: np.ndarray,
                   centering: CenteringInfo) -> ProjectionModel:
    if kind == "pca":
        return fit_pca(X_centered, r, centering=centering)
    return fit_spca(X_centered, r, config.density, max_iters=config.spca_max_iters, tol=config.spca_tol,
                    centering=centering)


def train_head(config: ExperimentConfig, projection: ProjectionModel, train: LabeledDataset) -> Tuple[AnyHead, TrainLog]:
    Z = project(projection, train.X)
    if config.head == "linear":
        return fit_linear_head(Z, train.y, config.train, num_classes=train.K)
    return train_mlp(Z, train.y, config.train, num_classes=train.K)


def attack_cells(config: ExperimentConfig) -> List[Tuple[str, str]]:
    """(attack, norm) pairs of the grid; the square attack has no l2 variant."""
    return [(a, p) for a in config.attacks for p in config.norms if not (a == "square" and p == "2")]


def attack_config(config: ExperimentConfig, attack: str, p: str, eps: float) -> AttackConfig:
    return AttackConfig(
        kind=attack,
        threat=ThreatModel(p=p, epsilon=eps),
        budget=config.square_budget,
        seed=config.seed,
        clip_to_unit_box=config.clip,
    )


def artifact_stem(config: ExperimentConfig, kind: str, r: int) -> str:
    return f"{config.dataset}_{kind}_r{r}_{config.head}"


# --- State Management ---
class SweepState(TypedDict, total=False):
    config: ExperimentConfig
    train: LabeledDataset
    test: LabeledDataset
    X_centered: np.ndarray
    centering: CenteringInfo
    cells: List[Tuple[str, int]]
    cell_index: int
    projection: Optional[ProjectionModel]
    head: Optional[AnyHead]
    error: Optional[str]
    rows: Annotated[List[ResultRow], operator.add]
    table: List[ResultRow]


# --- Sweep Class ---
class RobustnessSweep(BaseModel):
    """
    Runs the (projection kind x r x attack x norm x epsilon) grid as a graph:
    data is loaded once, then each (kind, r) cell fits a projection, trains a
    head, and evaluates clean, certified and attacked accuracy.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ExperimentConfig
    graph: Any = Field(default=None, exclude=True)

    def setup_graph(self):
        self.graph = self.build_graph()
        return self.graph

    def _row(self, state: SweepState, attack: str, norm: str, eps: float, accuracy: Optional[float], n: int) -> ResultRow:
        kind, r = state["cells"][state["cell_index"]]
        return ResultRow(
            dataset=self.config.dataset, projection=kind, r=r, head=self.config.head, attack=attack,
            norm=norm, epsilon=eps, accuracy=accuracy, n=n, seed=self.config.seed,
        )

    def load_data_node(self, state: SweepState) -> dict:
        banner("LOAD DATA")
        config = state["config"]
        train, test = load_datasets(config)
        train = train.head(config.train_limit)
        test = test.head(config.limit)
        X_centered, centering = center(train.X)
        max_r = max(config.components)
        if max_r > train.D:
            logger.warning("r=%d exceeds D=%d; those cells will fail", max_r, train.D)
        cells = [(kind, r) for kind in config.projections for r in config.components]
        logger.info("%s: %d train / %d test rows, D=%d, %d cells", train.name, train.N, test.N, train.D, len(cells))
        return {"train": train, "test": test, "X_centered": X_centered, "centering": centering,
                "cells": cells, "cell_index": -1}

    def next_cell_node(self, state: SweepState) -> dict:
        return {"cell_index": state["cell_index"] + 1, "projection": None, "head": None, "error": None}

    def fit_projection_node(self, state: SweepState) -> dict:
        kind, r = state["cells"][state["cell_index"]]
        banner(f"FIT {kind.upper()} r={r}")
        try:
            projection = fit_projection(state["config"], kind, r, state["X_centered"], state["centering"])
        except CELL_FAILURES as e:
            logger.warning("fitting %s r=%d failed: %s\n%s", kind, r, e, traceback.format_exc())
            return {"error": str(e)}
        return {"projection": projection}

    def train_head_node(self, state: SweepState) -> dict:
        config = state["config"]
        kind, r = state["cells"][state["cell_index"]]
        banner(f"TRAIN {config.head.upper()} HEAD ({kind} r={r})")
        try:
            head, log = train_head(config, state["projection"], state["train"])
        except CELL_FAILURES as e:
            logger.warning("training on %s r=%d failed: %s\n%s", kind, r, e, traceback.format_exc())
            return {"error": str(e)}
        if log.epochs:
            logger.info("final training loss %.4f, accuracy %.4f", log.epochs[-1].loss, log.epochs[-1].accuracy)
        save_model(os.path.join(config.output_dir, "models", artifact_stem(config, kind, r) + ".spcr"),
                   state["projection"], head)
        return {"head": head}

    def certify_node(self, state: SweepState) -> dict:
        """Certified-accuracy rows and per-example certificate files; linear heads only."""
        config, test = state["config"], state["test"]
        kind, r = state["cells"][state["cell_index"]]
        banner(f"CERTIFY ({kind} r={r})")
        rows: List[ResultRow] = []
        for p in config.norms:
            label = norm_label(p)
            try:
                curve = certified_accuracy_curve(state["projection"], state["head"], test, p, config.epsilons)
                records = certify_dataset(state["projection"], state["head"], test, p)
            except CELL_FAILURES as e:
                logger.warning("certificates for %s r=%d (%s) failed: %s", kind, r, label, e)
                rows += [self._row(state, "certified", label, eps, None, test.N) for eps in config.epsilons]
                continue
            rows += [self._row(state, "certified", label, eps, acc, test.N) for eps, acc in curve]
            write_certificate_csv(records, os.path.join(
                config.output_dir, "certificates", f"{artifact_stem(config, kind, r)}_{label}.csv"))
        return {"rows": rows}

    def attack_node(self, state: SweepState) -> dict:
        config, test = state["config"], state["test"]
        projection, head = state["projection"], state["head"]
        kind, r = state["cells"][state["cell_index"]]
        banner(f"ATTACK ({kind} r={r})")
        clean = float(np.mean(Classifier(projection=projection, head=head).predict(test.X) == test.y))
        logger.info("clean accuracy %.4f", clean)
        rows = [self._row(state, "clean", "none", 0.0, clean, test.N)]
        grid = [(a, p, eps) for a, p in attack_cells(config) for eps in config.epsilons]
        for attack, p, eps in tqdm(grid, desc=f"{kind} r={r}", leave=False):
            try:
                acc: Optional[float] = robust_accuracy(projection, head, test, attack_config(config, attack, p, eps))
            except CELL_FAILURES as e:
                logger.warning("%s %s eps=%g on %s r=%d failed: %s", attack, norm_label(p), eps, kind, r, e)
                acc = None
            rows.append(self._row(state, attack, norm_label(p), eps, acc, test.N))
        self.write_summary(state, clean)
        return {"rows": rows}

    def write_summary(self, state: SweepState, clean: float) -> None:
        """Sparsity, norm and sensitivity diagnostics of one fitted model as JSON."""
        config = state["config"]
        projection, head = state["projection"], state["head"]
        kind, r = state["cells"][state["cell_index"]]
        ops = operator_norm_diagnostics(projection.W)
        summary: Dict[str, Any] = {
            "dataset": config.dataset,
            "projection": kind,
            "r": r,
            "head": config.head,
            "seed": config.seed,
            "converged": projection.converged,
            "clean_accuracy": clean,
            "sparsity": sparsity_report(projection).summary(),
            "operator_norms": ops.model_dump(),
            "head_lipschitz": lipschitz_upper_bound(head),
            "sensitivity": sensitivity_bound(projection, head).model_dump(),
        }
        if isinstance(head, LinearHead):
            summary["margins"] = {norm_label(p): margin_report(projection, head, state["test"], p).model_dump()
                                  for p in config.norms}
            summary["dual_norm_bounds"] = dual_norm_bound_report(projection, head).model_dump()
        path = os.path.join(config.output_dir, "models", artifact_stem(config, kind, r) + ".json")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)

    def record_failure_node(self, state: SweepState) -> dict:
        """Error-marker rows for every grid cell of a (kind, r) whose fit or training failed."""
        config, test = state["config"], state["test"]
        kind, r = state["cells"][state["cell_index"]]
        logger.warning("recording error rows for %s r=%d: %s", kind, r, state.get("error"))
        rows = [self._row(state, "clean", "none", 0.0, None, test.N)]
        if config.head == "linear" and config.certify:
            rows += [self._row(state, "certified", norm_label(p), eps, None, test.N)
                     for p in config.norms for eps in config.epsilons]
        rows += [self._row(state, a, norm_label(p), eps, None, test.N)
                 for a, p in attack_cells(config) for eps in config.epsilons]
        return {"rows": rows}

    def write_outputs_node(self, state: SweepState) -> dict:
        banner("WRITE RESULTS")
        config = state["config"]
        table = sorted(state.get("rows", []), key=lambda row: row.sort_key())
        write_csv(table, os.path.join(config.output_dir, RESULTS_FILE))
        failed = sum(1 for row in table if row.accuracy is None)
        if failed:
            logger.warning("%d of %d result rows are error markers", failed, len(table))
        return {"table": table}

    def build_graph(self):
        """Builds the sweep graph; the (kind, r) cells loop through next_cell."""
        graph_builder = StateGraph(SweepState)

        graph_builder.add_node("load_data", self.load_data_node)
        graph_builder.add_node("next_cell", self.next_cell_node)
        graph_builder.add_node("fit_projection", self.fit_projection_node)
        graph_builder.add_node("train_head", self.train_head_node)
        graph_builder.add_node("certify", self.certify_node)
        graph_builder.add_node("attack", self.attack_node)
        graph_builder.add_node("record_failure", self.record_failure_node)
        graph_builder.add_node("write_outputs", self.write_outputs_node)

        graph_builder.set_entry_point("load_data")
        graph_builder.add_edge("load_data", "next_cell")
        graph_builder.add_conditional_edges(
            "next_cell",
            lambda state: "fit_projection" if state["cell_index"] < len(state["cells"]) else "write_outputs",
        )
        graph_builder.add_conditional_edges(
            "fit_projection",
            lambda state: "record_failure" if state.get("error") else "train_head",
        )
        graph_builder.add_conditional_edges(
            "train_head",
            lambda state: "record_failure" if state.get("error")
            else "certify" if self.config.head == "linear" and self.config.certify
            else "attack",
        )
        graph_builder.add_edge("certify", "attack")
        graph_builder.add_edge("attack", "next_cell")
        graph_builder.add_edge("record_failure", "next_cell")
        graph_builder.add_edge("write_outputs", END)

        return graph_builder.compile()

    def run(self) -> List[ResultRow]:
        if self.graph is None:
            self.setup_graph()
        n_cells = len(self.config.projections) * len(self.config.components)
        # load, write and up to five steps per cell
        limit = 10 + 6 * n_cells
        final_state = self.graph.invoke({"config": self.config, "rows": []}, config={"recursion_limit": limit})
        return final_state["table"]


def run_sweep(config: ExperimentConfig) -> List[ResultRow]:
    """
    Fits, trains and attacks every grid cell of ``config`` and writes
    ``results.csv``, model files, model summaries and certificate details
    under ``config.output_dir``. Rows come back in sorted-key order.
    """
    return RobustnessSweep(config=config).run()
