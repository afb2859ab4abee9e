use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use cortrack::pipeline::PipelineConfig;

/// GA and K-means settings that can be overridden on the command line.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Base seed for every derived per-frame stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// GA population size.
    #[arg(long, global = true)]
    pub population: Option<usize>,
    /// GA generation cap.
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    #[arg(long, global = true)]
    pub crossover_prob: Option<f64>,
    #[arg(long, global = true)]
    pub mutation_prob: Option<f64>,
    /// GA improvement tolerance for the patience counter.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// K-means restarts.
    #[arg(long, global = true)]
    pub k_init: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.population {
            cfg.ga.population_size = v;
        }
        if let Some(v) = self.max_iter {
            cfg.ga.max_iterations = v;
        }
        if let Some(v) = self.crossover_prob {
            cfg.ga.crossover_prob = v;
        }
        if let Some(v) = self.mutation_prob {
            cfg.ga.mutation_prob = v;
        }
        if let Some(v) = self.tol {
            cfg.ga.tolerance = v;
        }
        if let Some(v) = self.k_init {
            cfg.kmeans.n_init = v;
        }
    }
}

/// Reads a TOML pipeline config (missing keys take defaults), then applies
/// the command-line overrides and validates the result.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
