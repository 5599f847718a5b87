"""Counterexample-guided training loop.

Alternates a training pass with sampled validation at a fixed seed and
folds the worst violating states back into the dataset, duplicated so the
batch loss feels them. The validation seed stays the same every round so
the violation counts are comparable; the training seed shifts per round
so fine-tuning sees fresh shuffles.
"""

from dataclasses import dataclass, field

from ..dynamics import pendulum
from ..training import (Dataset, _substreams, augment_with_counterexamples,
                        sample_uniform, train_clf_pendulum)
from .verify import sampling_validate


@dataclass
class CegisResult:
    spec: object
    dataset: Dataset
    reports: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def violations(self):
        return [r.violations for r in self.reports]


def cegis_loop(config, system=None, rounds=3, validate_n=10000,
               validate_seed=None, duplication=10, finetune_epochs=None,
               tol=0.0, trainer=train_clf_pendulum):
    """Run `rounds` of train / validate / augment; returns a CegisResult.

    Round 0 trains from scratch with the full config (pretraining
    included); later rounds fine-tune the same spec with pretraining off.
    The final report in the result reflects the shipped parameters.
    """
    if rounds <= 0:
        raise ValueError("need at least one round")
    if finetune_epochs is None:
        finetune_epochs = max(config.epochs - config.pretrain_epochs, 1)
    if validate_seed is None:
        validate_seed = config.seed + 10007
    system = system or pendulum()
    r_sample = _substreams(config.seed, 1)[0]
    dataset = Dataset(sample_uniform(system.x_box, config.n_samples, r_sample),
                      cap=config.cex_cap)
    spec = None
    result = CegisResult(spec=None, dataset=dataset)
    for rnd in range(rounds):
        cfg = config if rnd == 0 else config.replace(
            epochs=finetune_epochs, pretrain_epochs=0, seed=config.seed + rnd)
        spec, hist = trainer(cfg, system=system, dataset=dataset, spec=spec)
        result.history.extend(hist)
        report = sampling_validate(spec, system, validate_n,
                                   seed=validate_seed, tol=tol)
        result.reports.append(report)
        if rnd + 1 < rounds and report.counterexamples:
            augment_with_counterexamples(dataset, report,
                                         duplication=duplication)
    result.spec = spec
    return result
