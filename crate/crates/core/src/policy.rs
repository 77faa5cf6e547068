//! A trained denoiser together with everything needed to apply it to a new
//! network: edge and feature normalization, the noise schedule and the
//! sampler defaults.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use diffalloc_tensor::{read_checkpoint, write_checkpoint};
use serde::{Deserialize, Serialize};

use crate::channel::NetworkState;
use crate::diffusion::{sample_allocations, NoiseSchedule, SamplerConfig, ScheduleConfig};
use crate::error::Result;
use crate::gnn::{build_operator, DenoiserConfig, DenoiserModel, EdgeNormalization, FeatureStats};
use crate::rates::Allocation;
use crate::rng::key_of;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub architecture: DenoiserConfig,
    pub normalization: EdgeNormalization,
    pub feature_stats: FeatureStats,
    pub schedule: ScheduleConfig,
}

#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub model: DenoiserModel<f32>,
    pub normalization: EdgeNormalization,
    pub feature_stats: FeatureStats,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
}

pub fn model_sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

impl TrainedPolicy {
    pub fn new(
        model: DenoiserModel<f32>,
        normalization: EdgeNormalization,
        feature_stats: FeatureStats,
        schedule_config: ScheduleConfig,
    ) -> Result<Self> {
        Ok(Self {
            schedule: NoiseSchedule::from_config(&schedule_config)?,
            model,
            normalization,
            feature_stats,
            schedule_config,
        })
    }

    /// `n` allocations for `state` at `f_min`. Sample streams are keyed by
    /// the network id and sample index.
    pub fn sample(
        &self,
        state: &NetworkState,
        network_id: &str,
        f_min: f64,
        n: usize,
        sampler: &SamplerConfig,
    ) -> Result<Vec<Allocation>> {
        let op = build_operator(state, &self.normalization, self.model.config.depth)?;
        let u = self.feature_stats.normalize(&state.node_features(f_min));
        sample_allocations(
            &self.model,
            &op,
            &u,
            &self.schedule,
            sampler,
            key_of(network_id),
            n,
            state.config.p_max_mw,
            100,
        )
    }

    pub fn sidecar(&self) -> ModelSidecar {
        ModelSidecar {
            architecture: self.model.config.clone(),
            normalization: self.normalization,
            feature_stats: self.feature_stats,
            schedule: self.schedule_config,
        }
    }

    /// Writes the checkpoint and its JSON sidecar next to it.
    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(checkpoint)?);
        write_checkpoint(&mut w, &self.model.params)?;
        w.flush()?;
        std::fs::write(
            model_sidecar_path(checkpoint),
            serde_json::to_string_pretty(&self.sidecar())? + "\n",
        )?;
        Ok(())
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let side: ModelSidecar = serde_json::from_str(&std::fs::read_to_string(model_sidecar_path(checkpoint))?)?;
        let params = read_checkpoint(&mut BufReader::new(File::open(checkpoint)?))?;
        let model = DenoiserModel::from_params(side.architecture, params)?;
        Self::new(model, side.normalization, side.feature_stats, side.schedule)
    }
}
