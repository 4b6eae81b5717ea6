//! Placement and threshold search.
//!
//! A candidate is a `(placement index, threshold index)` pair into a
//! [`MetricsTable`] built from sweep reports. The objective is
//!
//! `OF = w_acc * acc_norm + w_sen * sen_norm - w_com * flops_norm`
//!
//! with each component min-max normalized over the whole candidate universe
//! (a zero range normalizes to 0). [`optimize`] is a generational GA with
//! roulette selection, gene-swap crossover, single-gene mutation and an elite
//! of one; [`exhaustive`] scans every candidate and serves as its oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::evaluator::SweepReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub w_acc: f64,
    pub w_sen: f64,
    pub w_com: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            w_acc: 1.0,
            w_sen: 1.0,
            w_com: 1.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn new(w_acc: f64, w_sen: f64, w_com: f64) -> Result<Self> {
        let w = Self { w_acc, w_sen, w_com };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_acc, self.w_sen, self.w_com];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("objective weights must be finite and non-negative");
        }
        if all.iter().all(|&w| w == 0.0) {
            return invalid("objective weights must not all be zero");
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            w_acc: self.w_acc * k,
            w_sen: self.w_sen * k,
            w_com: self.w_com * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            generations: 50,
            crossover_prob: 0.8,
            mutation_prob: 0.1,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return invalid("population size must be at least 2");
        }
        if self.generations < 1 {
            return invalid("generations must be at least 1");
        }
        for (name, p) in [("crossover", self.crossover_prob), ("mutation", self.mutation_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Ordered by placement, then threshold, which is also the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Chromosome {
    pub placement: usize,
    pub threshold: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub flops: f64,
}

/// Metrics for every (placement, threshold) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub placements: Vec<Vec<usize>>,
    pub thresholds: Vec<f64>,
    /// `cells[placement][threshold]`.
    pub cells: Vec<Vec<Metrics>>,
}

impl MetricsTable {
    pub fn new(placements: Vec<Vec<usize>>, thresholds: Vec<f64>, cells: Vec<Vec<Metrics>>) -> Result<Self> {
        if cells.len() != placements.len() || cells.iter().any(|row| row.len() != thresholds.len()) {
            return invalid("metrics table dimensions do not match its axes");
        }
        Ok(Self {
            placements,
            thresholds,
            cells,
        })
    }

    /// One row per sweep report; every report must share the threshold grid.
    pub fn from_sweeps(reports: &[SweepReport]) -> Result<Self> {
        let Some(first) = reports.first() else {
            return invalid("no sweep reports");
        };
        let thresholds: Vec<f64> = first.points.iter().map(|p| p.threshold).collect();
        let mut cells = Vec::with_capacity(reports.len());
        for r in reports {
            if r.points.iter().map(|p| p.threshold).ne(thresholds.iter().copied()) {
                return invalid("sweep reports use different threshold grids");
            }
            cells.push(
                r.points
                    .iter()
                    .map(|p| Metrics {
                        accuracy: p.system_accuracy,
                        sensitivity: p.system_sensitivity,
                        flops: p.total_flops,
                    })
                    .collect(),
            );
        }
        Self::new(reports.iter().map(|r| r.placement.clone()).collect(), thresholds, cells)
    }

    /// Every cell of the table.
    pub fn universe(&self) -> Vec<Chromosome> {
        (0..self.placements.len())
            .flat_map(|p| (0..self.thresholds.len()).map(move |t| Chromosome { placement: p, threshold: t }))
            .collect()
    }

    pub fn get(&self, c: Chromosome) -> Result<Metrics> {
        match self.cells.get(c.placement).and_then(|row| row.get(c.threshold)) {
            Some(m) => Ok(*m),
            None => invalid(format!("candidate {c:?} is outside the metrics table")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessScore {
    pub of_value: f64,
    pub raw: Metrics,
    pub normalized: Metrics,
}

/// Min-max ranges over a candidate universe, fixed for a whole search.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    table: &'a MetricsTable,
    weights: ObjectiveWeights,
    min: Metrics,
    max: Metrics,
}

fn norm(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (x - lo) / (hi - lo)
    } else {
        0.0
    }
}

impl<'a> Objective<'a> {
    pub fn new(universe: &[Chromosome], table: &'a MetricsTable, weights: ObjectiveWeights) -> Result<Self> {
        weights.validate()?;
        if universe.is_empty() {
            return invalid("candidate universe is empty");
        }
        let ms = universe.iter().map(|&c| table.get(c)).collect::<Result<Vec<_>>>()?;
        let fold = |f: fn(f64, f64) -> f64, init: f64| Metrics {
            accuracy: ms.iter().map(|m| m.accuracy).fold(init, f),
            sensitivity: ms.iter().map(|m| m.sensitivity).fold(init, f),
            flops: ms.iter().map(|m| m.flops).fold(init, f),
        };
        Ok(Self {
            table,
            weights,
            min: fold(f64::min, f64::INFINITY),
            max: fold(f64::max, f64::NEG_INFINITY),
        })
    }

    pub fn fitness(&self, c: Chromosome) -> Result<FitnessScore> {
        let raw = self.table.get(c)?;
        let normalized = Metrics {
            accuracy: norm(raw.accuracy, self.min.accuracy, self.max.accuracy),
            sensitivity: norm(raw.sensitivity, self.min.sensitivity, self.max.sensitivity),
            flops: norm(raw.flops, self.min.flops, self.max.flops),
        };
        let w = &self.weights;
        Ok(FitnessScore {
            of_value: w.w_acc * normalized.accuracy + w.w_sen * normalized.sensitivity - w.w_com * normalized.flops,
            raw,
            normalized,
        })
    }
}

/// Fitness of one candidate, normalized over `universe`.
pub fn fitness(
    candidate: Chromosome,
    universe: &[Chromosome],
    table: &MetricsTable,
    weights: ObjectiveWeights,
) -> Result<FitnessScore> {
    Objective::new(universe, table, weights)?.fitness(candidate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub chromosome: Chromosome,
    pub score: FitnessScore,
}

pub fn exhaustive(universe: &[Chromosome], table: &MetricsTable, weights: ObjectiveWeights) -> Result<Solution> {
    let obj = Objective::new(universe, table, weights)?;
    let mut sorted = universe.to_vec();
    sorted.sort();
    let mut best: Option<Solution> = None;
    for c in sorted {
        let score = obj.fitness(c)?;
        if best.as_ref().is_none_or(|b| score.of_value > b.score.of_value) {
            best = Some(Solution { chromosome: c, score });
        }
    }
    Ok(best.expect("universe is non-empty"))
}

/// Every candidate tied with the exhaustive optimum.
pub fn argmax_set(universe: &[Chromosome], table: &MetricsTable, weights: ObjectiveWeights) -> Result<Vec<Chromosome>> {
    let obj = Objective::new(universe, table, weights)?;
    let best = exhaustive(universe, table, weights)?.score.of_value;
    let mut out = Vec::new();
    for &c in universe {
        if obj.fitness(c)?.of_value == best {
            out.push(c);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub best_chromosome: Chromosome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub best: Solution,
    /// Entry 0 is the initial population, then one per generation.
    pub log: Vec<GenerationStats>,
}

/// GA with a random initial population drawn from `universe`.
pub fn optimize(
    universe: &[Chromosome],
    table: &MetricsTable,
    weights: ObjectiveWeights,
    cfg: &GaConfig,
) -> Result<GaResult> {
    cfg.validate()?;
    if universe.is_empty() {
        return invalid("candidate universe is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = (0..cfg.population_size)
        .map(|_| universe[rng.random_range(0..universe.len())])
        .collect();
    run(universe, table, weights, cfg, init, rng)
}

/// GA starting from a caller-supplied population.
pub fn optimize_from(
    universe: &[Chromosome],
    table: &MetricsTable,
    weights: ObjectiveWeights,
    cfg: &GaConfig,
    initial: Vec<Chromosome>,
) -> Result<GaResult> {
    cfg.validate()?;
    if initial.len() != cfg.population_size {
        return invalid(format!(
            "initial population has {} members, config asks for {}",
            initial.len(),
            cfg.population_size
        ));
    }
    if let Some(c) = initial.iter().find(|c| !universe.contains(c)) {
        return invalid(format!("initial member {c:?} is outside the universe"));
    }
    run(universe, table, weights, cfg, initial, ChaCha8Rng::seed_from_u64(cfg.seed))
}

fn evaluate(obj: &Objective, pop: Vec<Chromosome>) -> Result<Vec<(Chromosome, FitnessScore)>> {
    let mut scored = pop
        .into_iter()
        .map(|c| Ok((c, obj.fitness(c)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.of_value.total_cmp(&a.1.of_value).then(a.0.cmp(&b.0)));
    Ok(scored)
}

fn stats(generation: usize, scored: &[(Chromosome, FitnessScore)]) -> GenerationStats {
    GenerationStats {
        generation,
        best: scored[0].1.of_value,
        mean: scored.iter().map(|s| s.1.of_value).sum::<f64>() / scored.len() as f64,
        best_chromosome: scored[0].0,
    }
}

/// Roulette wheel on fitness shifted so the worst member has weight zero;
/// uniform when every member is equally fit.
fn select(scored: &[(Chromosome, FitnessScore)], rng: &mut ChaCha8Rng) -> Chromosome {
    let worst = scored.last().expect("non-empty").1.of_value;
    let total: f64 = scored.iter().map(|s| s.1.of_value - worst).sum();
    if total <= 0.0 {
        return scored[rng.random_range(0..scored.len())].0;
    }
    let mut r = rng.random::<f64>() * total;
    for (c, s) in scored {
        r -= s.of_value - worst;
        if r < 0.0 {
            return *c;
        }
    }
    scored[0].0
}

fn run(
    universe: &[Chromosome],
    table: &MetricsTable,
    weights: ObjectiveWeights,
    cfg: &GaConfig,
    initial: Vec<Chromosome>,
    mut rng: ChaCha8Rng,
) -> Result<GaResult> {
    let obj = Objective::new(universe, table, weights)?;
    let mut placements: Vec<usize> = universe.iter().map(|c| c.placement).collect();
    placements.sort();
    placements.dedup();
    let mut thresholds: Vec<usize> = universe.iter().map(|c| c.threshold).collect();
    thresholds.sort();
    thresholds.dedup();
    let in_universe = |c: &Chromosome| universe.contains(c);

    let mut scored = evaluate(&obj, initial)?;
    let mut log = vec![stats(0, &scored)];
    for g in 1..=cfg.generations {
        let mut next = vec![scored[0].0];
        while next.len() < cfg.population_size {
            let (a, b) = (select(&scored, &mut rng), select(&scored, &mut rng));
            let mut kids = if rng.random::<f64>() < cfg.crossover_prob {
                [
                    Chromosome { placement: a.placement, threshold: b.threshold },
                    Chromosome { placement: b.placement, threshold: a.threshold },
                ]
            } else {
                [a, b]
            };
            for (kid, parent) in kids.iter_mut().zip([a, b]) {
                if rng.random::<f64>() < cfg.mutation_prob {
                    if rng.random::<bool>() {
                        kid.placement = placements[rng.random_range(0..placements.len())];
                    } else {
                        kid.threshold = thresholds[rng.random_range(0..thresholds.len())];
                    }
                }
                if !in_universe(kid) {
                    *kid = parent;
                }
            }
            for kid in kids {
                if next.len() < cfg.population_size {
                    next.push(kid);
                }
            }
        }
        scored = evaluate(&obj, next)?;
        log.push(stats(g, &scored));
    }
    let (chromosome, score) = scored[0];
    Ok(GaResult {
        best: Solution { chromosome, score },
        log,
    })
}
