//! Genetic search over the unit sphere of plane normals.
//!
//! A chromosome is a unit normal; the plane always passes through the origin.
//! Fitness is the sample standard deviation of the distances from each
//! projected nucleus to the centroid of the projected nuclei, so a plane that
//! collapses every cell file onto a tight spot of a ring scores near zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FrameCloud, ProjectionPlane, Vec3};

/// A candidate plane. Same shape as [`ProjectionPlane`].
pub type Chromosome = ProjectionPlane;

const DEGENERATE_SUM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population_size: usize,
    pub max_iterations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    /// Minimum improvement of the best fitness that resets the plateau counter.
    pub tolerance: f64,
    /// Consecutive non-improving generations before stopping.
    pub patience: usize,
    pub elite_fraction: f64,
    /// Per-component standard deviation of mutation vectors.
    pub mutation_scale: f64,
    pub rng_seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 1000,
            max_iterations: 200,
            crossover_prob: 0.8,
            mutation_prob: 0.1,
            tolerance: 1e-4,
            patience: 20,
            elite_fraction: 0.2,
            mutation_scale: 0.05,
            rng_seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::Config("population_size must be at least 2".into()));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return Err(Error::Config("elite_fraction must lie in (0, 1)".into()));
        }
        for (name, p) in [
            ("crossover_prob", self.crossover_prob),
            ("mutation_prob", self.mutation_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.mutation_scale.is_nan() || self.mutation_scale < 0.0 || self.tolerance.is_nan() || self.tolerance < 0.0
        {
            return Err(Error::Config(
                "mutation_scale and tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaResult {
    pub best_plane: ProjectionPlane,
    pub best_fitness: f64,
    /// Best fitness after initialization and after every generation.
    pub fitness_history: Vec<f64>,
    pub generations_run: usize,
}

/// Precomputed fitness evaluation for one point set.
///
/// The centroid of projected points is the projection of the centroid, and
/// for a centered point `d` the in-plane distance is `sqrt(|d|² - (d·n)²)`,
/// so only one dot product per point is needed per candidate.
#[derive(Debug, Clone)]
pub struct FitnessEvaluator {
    centered: Vec<Vec3>,
    sq_norms: Vec<f64>,
}

impl FitnessEvaluator {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegenerateInput(format!(
                "fitness needs at least 2 points, got {}",
                points.len()
            )));
        }
        let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
        let centered: Vec<Vec3> = points.iter().map(|p| p - centroid).collect();
        let sq_norms = centered.iter().map(|d| d.norm_squared()).collect();
        Ok(Self { centered, sq_norms })
    }

    pub fn len(&self) -> usize {
        self.centered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centered.is_empty()
    }

    pub fn eval(&self, plane: &ProjectionPlane) -> f64 {
        self.eval_normal(&plane.normal())
    }

    /// Fitness of an arbitrary unit vector.
    pub fn eval_normal(&self, n: &Vec3) -> f64 {
        let count = self.centered.len() as f64;
        let mut dists = Vec::with_capacity(self.centered.len());
        let mut sum = 0.0;
        for (d, sq) in self.centered.iter().zip(&self.sq_norms) {
            let along = d.dot(n);
            let r = (sq - along * along).max(0.0).sqrt();
            sum += r;
            dists.push(r);
        }
        let mean = sum / count;
        let ss: f64 = dists.iter().map(|r| (r - mean) * (r - mean)).sum();
        (ss / (count - 1.0)).sqrt()
    }
}

/// Sample standard deviation (N-1) of distances from projected points to
/// their projected centroid.
pub fn fitness(points: &[Vec3], plane: &ProjectionPlane) -> Result<f64> {
    Ok(FitnessEvaluator::new(points)?.eval(plane))
}

pub(crate) fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// `population_size` normals drawn uniformly on the sphere.
pub fn init_population(config: &GaConfig, rng: &mut impl Rng) -> Vec<Chromosome> {
    (0..config.population_size)
        .map(|_| ProjectionPlane::from_unit(random_unit(rng)))
        .collect()
}

/// Antipodal parents sum to (nearly) zero and have no normalized child.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("parents are antipodal; their sum cannot be normalized")]
pub struct DegenerateCrossover;

/// Child = normalize(a + b).
pub fn crossover(a: &Chromosome, b: &Chromosome) -> std::result::Result<Chromosome, DegenerateCrossover> {
    let sum = a.normal() + b.normal();
    let len = sum.norm();
    if len < DEGENERATE_SUM {
        return Err(DegenerateCrossover);
    }
    Ok(ProjectionPlane::from_unit(sum / len))
}

/// normalize(c ± δ) with δ an isotropic Gaussian of per-component standard
/// deviation `scale` and the sign drawn uniformly.
pub fn mutate(c: &Chromosome, scale: f64, rng: &mut impl Rng) -> Chromosome {
    if scale == 0.0 {
        return *c;
    }
    loop {
        let delta = Vec3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) * scale;
        let v = if rng.random_bool(0.5) {
            c.normal() + delta
        } else {
            c.normal() - delta
        };
        let len = v.norm();
        if len >= DEGENERATE_SUM {
            return ProjectionPlane::from_unit(v / len);
        }
    }
}

fn elite_count(n: usize, elite_fraction: f64) -> usize {
    ((elite_fraction * n as f64).ceil() as usize).clamp(1, n)
}

/// Population indices ordered best first; ties go to the lower index.
fn ranking(fitnesses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitnesses.len()).collect();
    order.sort_by(|&a, &b| fitnesses[a].total_cmp(&fitnesses[b]).then(a.cmp(&b)));
    order
}

/// Truncation selection: the ⌈fraction·N⌉ lowest-fitness chromosomes.
pub fn select(population: &[(Chromosome, f64)], elite_fraction: f64) -> Vec<Chromosome> {
    let fit: Vec<f64> = population.iter().map(|(_, f)| *f).collect();
    let keep = elite_count(population.len(), elite_fraction);
    ranking(&fit).into_iter().take(keep).map(|i| population[i].0).collect()
}

/// Flips the normal so its largest-magnitude component is positive.
pub fn canonical_sign(plane: &ProjectionPlane) -> ProjectionPlane {
    let n = plane.normal();
    let idx = n.iamax();
    if n[idx] < 0.0 {
        plane.flipped()
    } else {
        *plane
    }
}

pub fn optimize_plane(frame: &FrameCloud, config: &GaConfig) -> Result<GaResult> {
    optimize_points(&frame.positions(), config)
}

pub fn optimize_points(points: &[Vec3], config: &GaConfig) -> Result<GaResult> {
    optimize_points_observed(points, config, |_, _| {})
}

/// Runs the GA, calling `observe(generation, population)` once per
/// generation (generation 0 is the initial population).
pub fn optimize_points_observed(
    points: &[Vec3],
    config: &GaConfig,
    mut observe: impl FnMut(usize, &[Chromosome]),
) -> Result<GaResult> {
    config.validate()?;
    let evaluator = FitnessEvaluator::new(points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let evaluate = |pop: &[Chromosome]| -> Vec<f64> { pop.par_iter().map(|c| evaluator.eval(c)).collect() };

    let mut population = init_population(config, &mut rng);
    let mut fitnesses = evaluate(&population);
    observe(0, &population);

    let mut order = ranking(&fitnesses);
    let mut best = fitnesses[order[0]];
    let mut history = vec![best];
    let mut stalled = 0;
    let keep = elite_count(config.population_size, config.elite_fraction);

    for generation in 1..=config.max_iterations {
        let elites: Vec<Chromosome> = order[..keep].iter().map(|&i| population[i]).collect();
        let elite_fit: Vec<f64> = order[..keep].iter().map(|&i| fitnesses[i]).collect();

        let mut children = Vec::with_capacity(config.population_size - keep);
        while keep + children.len() < config.population_size {
            let a = elites[rng.random_range(0..keep)];
            let b = elites[rng.random_range(0..keep)];
            let mut child = if rng.random::<f64>() < config.crossover_prob {
                // n and -n are the same plane; add in a common hemisphere.
                crossover(&a, &b.aligned_with(&a)).unwrap_or(a)
            } else {
                a
            };
            if rng.random::<f64>() < config.mutation_prob {
                child = mutate(&child, config.mutation_scale, &mut rng);
            }
            children.push(child);
        }
        let child_fit = evaluate(&children);

        population = elites;
        population.extend(children);
        fitnesses = elite_fit;
        fitnesses.extend(child_fit);
        observe(generation, &population);

        order = ranking(&fitnesses);
        let current = fitnesses[order[0]];
        if best - current < config.tolerance {
            stalled += 1;
        } else {
            stalled = 0;
        }
        best = current;
        history.push(best);
        if stalled >= config.patience {
            break;
        }
    }

    Ok(GaResult {
        best_plane: canonical_sign(&population[order[0]]),
        best_fitness: best,
        generations_run: history.len() - 1,
        fitness_history: history,
    })
}
