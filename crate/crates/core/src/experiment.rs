//! End-to-end runs: split, train, evaluate and report; plus the ablation grid.

use rayon::prelude::*;

use crate::config::{Ablation, ExperimentConfig};
use crate::data::{Dataset, Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{build_report, AblationGrid, ConfusionMatrix, EpochRecord, FinalMetrics, Report, SplitSizes};
use crate::model::{argmax, MultimodalModel};
use crate::trainer::{split_dataset, train_epoch, AdamWState, Split};

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Clean-view predictions of a frozen copy of `model`.
pub fn evaluate(model: &MultimodalModel, records: &[SampleRecord]) -> Result<Evaluation> {
    let frozen = model.frozen();
    let mut confusion = ConfusionMatrix::new(model.dims.classes);
    for r in records {
        let out = frozen.forward(r)?;
        confusion.record(r.label, argmax(out.logits.data()))?;
    }
    Ok(Evaluation {
        accuracy: confusion.accuracy()?,
        macro_f1: confusion.macro_f1()?,
        confusion,
    })
}

/// Checks that dataset and model agree on every shared dimension.
pub fn check_compatible(config: &ExperimentConfig, manifest: &Manifest) -> Result<()> {
    let m = &config.model;
    let pairs = [
        ("classes", m.classes, manifest.classes),
        ("vocab_size", m.vocab_size, manifest.vocab_size),
        ("n_t_max", m.n_t_max, manifest.n_t_max),
        ("channels", m.channels, manifest.channels),
        ("height", m.height, manifest.height),
        ("width", m.width, manifest.width),
    ];
    for (name, model, data) in pairs {
        if model != data {
            return Err(Error::Config(format!(
                "model.{name} = {model} but the dataset declares {data}"
            )));
        }
    }
    Ok(())
}

/// A finished run with its trained model and split.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: Report,
    pub model: MultimodalModel,
    pub split: Split,
}

pub fn run(config: &ExperimentConfig, dataset: &Dataset) -> Result<Report> {
    Ok(run_detailed(config, dataset)?.report)
}

pub fn run_detailed(config: &ExperimentConfig, dataset: &Dataset) -> Result<RunOutcome> {
    config.validate()?;
    check_compatible(config, &dataset.manifest)?;
    let split = split_dataset(&dataset.records, config.seed)?;
    let mut model = MultimodalModel::new(config)?;
    let sizes: Vec<usize> = model.params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamWState::new(config.optimizer, &sizes);

    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let stats = train_epoch(&mut model, &mut opt, &split.train, config, epoch as u64)?;
        let val = evaluate(&model, &split.val)?;
        epochs.push(EpochRecord {
            epoch,
            loss_total: stats.loss_total,
            loss_sc: stats.loss_sc,
            loss_supcon: stats.loss_supcon,
            train_acc: stats.train_acc,
            val_acc: val.accuracy,
            val_macro_f1: val.macro_f1,
        });
    }
    let test = evaluate(&model, &split.test)?;
    let train = evaluate(&model, &split.train)?;
    let report = build_report(
        config,
        SplitSizes {
            train: split.train.len(),
            val: split.val.len(),
            test: split.test.len(),
        },
        model.params.parameter_count(),
        epochs,
        FinalMetrics {
            test_acc: test.accuracy,
            test_macro_f1: test.macro_f1,
            train_acc: train.accuracy,
        },
    );
    Ok(RunOutcome { report, model, split })
}

/// Runs every ablation combination from the same base config (and seed).
/// Combinations run in parallel; rows come back in grid order.
pub fn ablate(config: &ExperimentConfig, dataset: &Dataset) -> Result<AblationGrid> {
    let rows = Ablation::grid()
        .into_par_iter()
        .map(|ablation| {
            let cfg = ExperimentConfig {
                ablation,
                ..config.clone()
            };
            run(&cfg, dataset).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", ablation.label())),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationGrid { rows })
}
