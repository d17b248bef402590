//! Loading of circuits, designs and noise models from command arguments.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aces_core::circuit::{build_family, build_rotated_surface_circuit, build_unrotated_surface_circuit, CodeKind};
use aces_core::design::DesignFile;
use aces_core::noise::{default_log_variance, depolarising_model, lognormal_model, ErrorRates, NoiseModelFile};
use aces_core::{Circuit, ExperimentalDesign, NoiseModel};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Rotated,
    Unrotated,
}

pub fn surface_circuit(layout: Layout, distance: usize) -> Result<Circuit, CliError> {
    Ok(match layout {
        Layout::Rotated => build_rotated_surface_circuit(distance)?,
        Layout::Unrotated => build_unrotated_surface_circuit(distance)?,
    })
}

/// The same code family as `c`, at distance `d`.
pub fn resize(c: &Circuit, d: usize) -> Result<Circuit, CliError> {
    let family = c
        .family
        .as_ref()
        .ok_or_else(|| CliError::usage(format!("circuit {:?} is not a generated code family", c.name)))?;
    match family.kind {
        CodeKind::Rotated | CodeKind::Unrotated => Ok(build_family(family.kind, d, d)?),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load_circuit(path: &Path) -> Result<Circuit, CliError> {
    serde_json::from_slice(&read(path)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load_design(path: &Path) -> Result<ExperimentalDesign, CliError> {
    let f: DesignFile =
        serde_json::from_slice(&read(path)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(ExperimentalDesign::from_file(f)?)
}

pub fn design_json(d: &ExperimentalDesign) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(&d.to_file(false, false))?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Depolarising,
    Lognormal,
}

/// Noise model selection shared by the commands that need one.
#[derive(Clone, Debug, Args, Serialize)]
pub struct NoiseArgs {
    /// Synthetic noise family; ignored when --noise-file is given
    #[arg(long, value_enum, default_value = "depolarising")]
    pub noise: NoiseKind,
    /// Single-qubit gate error rate
    #[arg(long, default_value_t = ErrorRates::default().r1)]
    pub r1: f64,
    /// Two-qubit gate error rate
    #[arg(long, default_value_t = ErrorRates::default().r2)]
    pub r2: f64,
    /// Measurement error rate
    #[arg(long, default_value_t = ErrorRates::default().rm)]
    pub rm: f64,
    /// Seed of the log-normal instance (required with --noise lognormal)
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Total log-variance of the log-normal error rates
    #[arg(long)]
    pub log_variance: Option<f64>,
    /// Noise model JSON for the design's circuit
    #[arg(long)]
    pub noise_file: Option<PathBuf>,
}

impl NoiseArgs {
    pub fn rates(&self) -> ErrorRates {
        ErrorRates {
            r1: self.r1,
            r2: self.r2,
            rm: self.rm,
        }
    }

    pub fn build(&self, c: &Circuit) -> Result<NoiseModel, CliError> {
        if let Some(path) = &self.noise_file {
            let f: NoiseModelFile =
                serde_json::from_slice(&read(path)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            return Ok(NoiseModel::from_file(c, f)?);
        }
        self.build_synthetic(c, self.noise_seed)
    }

    /// Synthetic model with an explicit seed override (for ensembles).
    pub fn build_synthetic(&self, c: &Circuit, seed: Option<u64>) -> Result<NoiseModel, CliError> {
        match self.noise {
            NoiseKind::Depolarising => Ok(depolarising_model(c, self.rates())?),
            NoiseKind::Lognormal => {
                let seed = seed.ok_or_else(|| CliError::usage("--noise lognormal needs an explicit --noise-seed"))?;
                let sigma = self.log_variance.unwrap_or_else(default_log_variance);
                Ok(lognormal_model(c, self.rates(), sigma, seed)?)
            }
        }
    }
}

pub fn shared(c: Circuit) -> Arc<Circuit> {
    Arc::new(c)
}
