//! The reference experiment: the default synthetic dataset and training
//! configuration, trained per seed and analysed on the held-out split.

use poe_core::data::{generate, Dataset, DatasetSpec};
use poe_core::eval::{uncertainty_analysis, AnalysisOptions, EvalReport};
use poe_core::model::{train, Mode, PoeModel, TrainConfig, TrainingReport};
use poe_core::Result;

/// Seeds the direction-of-effect checks average over.
pub const REFERENCE_SEEDS: [u64; 3] = [0, 1, 2];

/// Default dataset spec (4000 samples, 8 features, 5 classes, two-level
/// noise mixture) with the given seed.
pub fn reference_dataset(seed: u64) -> Result<Dataset> {
    generate(&DatasetSpec {
        seed,
        ..DatasetSpec::default()
    })
}

pub fn reference_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct ReferenceRun {
    pub model: PoeModel,
    pub training: TrainingReport,
    pub eval: EvalReport,
}

/// Trains `config` on the non-held-out part of `data` and runs the default
/// uncertainty analysis on the held-out part, seeded with `config.seed`.
pub fn fit_and_analyse(config: TrainConfig, data: &Dataset) -> Result<ReferenceRun> {
    let (train_set, test) = data.split_holdout(config.holdout_fraction)?;
    let seed = config.seed;
    let mut model = PoeModel::new(train_set.feature_dim(), config)?;
    let training = train(&mut model, &train_set)?;
    let opts = AnalysisOptions {
        seed,
        ..AnalysisOptions::default()
    };
    let eval = uncertainty_analysis(&model, &test, &opts)?;
    Ok(ReferenceRun {
        model,
        training,
        eval,
    })
}
