//! Synthetic benchmark: simulate, corrupt, train, infer.

use super::{
    infer_full_match, train, EpochStats, InferConfig, MatchData, PipelineError, TrainConfig,
    TrainState,
};
use crate::eval::{baseline_detect, BaselineConfig, Prediction};
use crate::model::{DstModel, ModelConfig};
use crate::noise::{corrupt_match, NoiseConfig};
use crate::sim::{simulate_match, EventRecord, Pause, SimConfig};
use rayon::prelude::*;

/// Noise seeds are offset so they never coincide with simulation seeds.
const NOISE_SEED_OFFSET: u64 = 1_000_003;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<MatchData>,
    pub test: Vec<MatchData>,
    pub test_pauses: Vec<Vec<Pause>>,
}

impl Dataset {
    /// Matches `seed..seed + n_train` train, the next `n_test` test.
    pub fn synthetic(
        n_train: usize,
        n_test: usize,
        sim: &SimConfig,
        noise: &NoiseConfig,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        let all: Vec<(MatchData, Vec<Pause>)> = (0..n_train + n_test)
            .into_par_iter()
            .map(|i| {
                let s = seed + i as u64;
                let gt =
                    simulate_match(sim, s).map_err(|e| PipelineError::Config(e.to_string()))?;
                let cube = corrupt_match(&gt, noise, s + NOISE_SEED_OFFSET)
                    .map_err(PipelineError::Config)?;
                Ok((MatchData::new(i, &gt, cube), gt.pauses))
            })
            .collect::<Result<_, PipelineError>>()?;
        let mut train = Vec::with_capacity(n_train);
        let mut test = Vec::with_capacity(n_test);
        let mut test_pauses = Vec::with_capacity(n_test);
        for (i, (m, p)) in all.into_iter().enumerate() {
            if i < n_train {
                train.push(m);
            } else {
                test.push(m);
                test_pauses.push(p);
            }
        }
        Ok(Self {
            train,
            test,
            test_pauses,
        })
    }

    pub fn test_truth(&self) -> Vec<Vec<EventRecord>> {
        self.test.iter().map(|m| m.events.clone()).collect()
    }
}

pub fn baseline_predictions(
    data: &Dataset,
    config: &BaselineConfig,
) -> Result<Vec<Vec<Prediction>>, PipelineError> {
    data.test
        .par_iter()
        .zip(&data.test_pauses)
        .map(|(m, p)| baseline_detect(&m.cube, p, config).map_err(PipelineError::Config))
        .collect()
}

/// Train one DST arm on the training split and predict the test split.
pub fn dst_arm(
    data: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    model_seed: u64,
    infer: &InferConfig,
) -> Result<(DstModel, Vec<EpochStats>, Vec<Vec<Prediction>>), PipelineError> {
    let mut model = DstModel::init(model_config.clone(), model_seed)?;
    let mut state = TrainState::new(&model);
    let history = train(
        &mut model,
        &mut state,
        &data.train,
        train_config,
        |s, _, _| {
            log::info!("{}", serde_json::to_string(s).unwrap_or_default());
            Ok(())
        },
    )?;
    let preds = predict(&model, &data.test, infer)?;
    Ok((model, history, preds))
}

pub fn predict(
    model: &DstModel,
    matches: &[MatchData],
    infer: &InferConfig,
) -> Result<Vec<Vec<Prediction>>, PipelineError> {
    matches
        .iter()
        .map(|m| infer_full_match(model, m, infer).map(|(p, _)| p))
        .collect()
}
