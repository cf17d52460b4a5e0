//! Per-layer channel mask search: Bernoulli initialization, roulette-wheel
//! selection with elitism, single-point crossover, per-bit mutation, and an
//! exact-cardinality repair after every operator so the advertised
//! compression rate always holds.

use crate::fitness::{population_fitness, taylor_error, HessianCache};
use crate::{Error, Result, Tensor};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Binary channel mask: `true` keeps the channel, `false` prunes it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chromosome {
    bits: Vec<bool>,
}

impl Chromosome {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Chromosome { bits }
    }

    pub fn ones(len: usize) -> Self {
        Chromosome {
            bits: vec![true; len],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn hamming(&self, other: &Chromosome) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Kept-channel indices in ascending order.
    pub fn kept(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }

    /// MSB-first hex encoding (channel 0 is the high bit of the first digit).
    pub fn to_hex(&self) -> String {
        let mut out = String::with_capacity(self.bits.len().div_ceil(4));
        for chunk in self.bits.chunks(4) {
            let mut v = 0u8;
            for (i, &b) in chunk.iter().enumerate() {
                if b {
                    v |= 1 << (3 - i);
                }
            }
            out.push(char::from_digit(v as u32, 16).unwrap());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    /// Iteration budget; `None` resolves to `max(10 * channels, 50)`.
    pub generations: Option<usize>,
    pub elitism: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 20,
            crossover_prob: 0.1,
            mutation_prob: 0.1,
            generations: None,
            elitism: 1,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::InvalidArgument("population must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.crossover_prob) {
            return Err(Error::InvalidArgument(format!(
                "crossover_prob {} outside [0, 1]",
                self.crossover_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(Error::InvalidArgument(format!(
                "mutation_prob {} outside [0, 1]",
                self.mutation_prob
            )));
        }
        if self.elitism >= self.population {
            return Err(Error::InvalidArgument(
                "population smaller than elitism count".into(),
            ));
        }
        if self.generations == Some(0) {
            return Err(Error::InvalidArgument("need at least one generation".into()));
        }
        Ok(())
    }

    pub fn generations_for(&self, channels: usize) -> usize {
        self.generations.unwrap_or((10 * channels).max(50))
    }
}

#[derive(Debug, Clone)]
pub struct Population {
    pub individuals: Vec<Chromosome>,
    pub generation: usize,
}

/// i.i.d. Bernoulli(p) bits, before any repair.
pub fn bernoulli_bits(channels: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..channels).map(|_| rng.gen_bool(p)).collect()
}

/// Initial population: Bernoulli(keep_fraction) bits repaired to exactly
/// `round(keep_fraction * channels)` kept channels each.
pub fn init_population(
    channels: usize,
    keep_fraction: f64,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Population> {
    if channels == 0 {
        return Err(Error::InvalidArgument("zero channels".into()));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep fraction {keep_fraction} outside (0, 1]; pruning a whole layer is rejected"
        )));
    }
    let k = ((keep_fraction * channels as f64).round() as usize).max(1);
    let individuals = (0..size)
        .map(|_| {
            let bits = bernoulli_bits(channels, keep_fraction, rng);
            repair(Chromosome::from_bits(bits), k, rng)
        })
        .collect();
    Ok(Population {
        individuals,
        generation: 0,
    })
}

/// Forces the popcount to exactly `k` by flipping a uniformly chosen minimal
/// set of bits; a chromosome already at `k` passes through unchanged.
pub fn repair(mut chrom: Chromosome, k: usize, rng: &mut impl Rng) -> Chromosome {
    let have = chrom.popcount();
    if have > k {
        let mut ones: Vec<usize> = chrom
            .bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect();
        for _ in 0..(have - k) {
            let pick = rng.gen_range(0..ones.len());
            chrom.bits[ones.swap_remove(pick)] = false;
        }
    } else if have < k {
        let mut zeros: Vec<usize> = chrom
            .bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| !b)
            .map(|(i, _)| i)
            .collect();
        for _ in 0..(k - have) {
            let pick = rng.gen_range(0..zeros.len());
            chrom.bits[zeros.swap_remove(pick)] = true;
        }
    }
    chrom
}

/// Roulette-wheel selection: `P(n) = fitness_n / sum(fitness)`. An all-zero
/// vector falls back to the uniform distribution.
pub fn roulette_select(fitness: &[f64], rng: &mut impl Rng) -> usize {
    debug_assert!(!fitness.is_empty());
    let total: f64 = fitness.iter().sum();
    if total <= 0.0 {
        return rng.gen_range(0..fitness.len());
    }
    let mut ticket = rng.gen_range(0.0..total);
    for (i, &f) in fitness.iter().enumerate() {
        if ticket < f {
            return i;
        }
        ticket -= f;
    }
    fitness.len() - 1
}

/// `a[0..cut) ++ b[cut..len)`; `cut = len` copies `a` whole.
pub fn splice(a: &Chromosome, b: &Chromosome, cut: usize) -> Chromosome {
    debug_assert_eq!(a.len(), b.len());
    let bits = a.bits[..cut]
        .iter()
        .chain(&b.bits[cut..])
        .copied()
        .collect();
    Chromosome::from_bits(bits)
}

fn crossover_step(
    a: &Chromosome,
    b: &Chromosome,
    p_c: f64,
    rng: &mut impl Rng,
) -> Result<(Chromosome, bool)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "crossover of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if p_c > 0.0 && rng.gen_bool(p_c) {
        // The crossover point is a uniformly chosen bit, probability 1/l each.
        let cut = rng.gen_range(1..=a.len());
        Ok((splice(a, b, cut), true))
    } else {
        Ok((a.clone(), false))
    }
}

/// Single-point crossover with probability `p_c`, otherwise a copy of `a`.
pub fn crossover(
    a: &Chromosome,
    b: &Chromosome,
    p_c: f64,
    rng: &mut impl Rng,
) -> Result<Chromosome> {
    crossover_step(a, b, p_c, rng).map(|(c, _)| c)
}

/// Chooses one bit uniformly and inverts it with probability `p_m`; at most
/// one bit differs from the input.
pub fn mutate(chrom: &Chromosome, p_m: f64, rng: &mut impl Rng) -> Chromosome {
    debug_assert!(!chrom.is_empty());
    let bit = rng.gen_range(0..chrom.len());
    let mut out = chrom.clone();
    if p_m > 0.0 && rng.gen_bool(p_m) {
        out.bits[bit] = !out.bits[bit];
    }
    out
}

/// Everything `evolve` needs to score masks for one layer.
pub struct LayerContext<'a> {
    pub hessian: &'a HessianCache,
    /// Consumer-layer weights, `F x (C*K*K)`.
    pub weights: &'a Tensor,
    pub channels: usize,
    /// Fraction of channels to remove; keeps `round((1 - rate) * C)`.
    pub rate: f64,
}

impl LayerContext<'_> {
    pub fn keep_count(&self) -> Result<usize> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::InvalidArgument(format!(
                "compression rate {} outside [0, 1)",
                self.rate
            )));
        }
        let k = ((1.0 - self.rate) * self.channels as f64).round() as usize;
        if k == 0 {
            return Err(Error::InvalidArgument(
                "rate keeps zero channels; pruning a whole layer is rejected".into(),
            ));
        }
        Ok(k)
    }
}

/// One row of the search log.
#[derive(Debug, Clone, Serialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_error: f64,
    pub mean_error: f64,
    pub best_mask: String,
}

#[derive(Debug, Clone)]
pub struct EvolveResult {
    pub best: Chromosome,
    pub best_error: f64,
    pub keep: usize,
    pub history: Vec<GenerationRecord>,
}

impl EvolveResult {
    /// Search log as CSV (`generation,best_error,mean_error,best_mask`).
    pub fn history_csv(&self) -> String {
        let mut out = String::from("generation,best_error,mean_error,best_mask\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.generation, r.best_error, r.mean_error, r.best_mask
            ));
        }
        out
    }
}

/// Evolves a channel mask for one layer.
///
/// Each generation evaluates the population in parallel, copies the best
/// individuals unchanged (elitism), and fills the remaining slots by
/// roulette-selecting a pair, crossing it over with probability `p_C`,
/// otherwise mutating with probability `p_M`, with repair after every
/// operator. Returns the lowest-error mask ever evaluated.
pub fn evolve(ctx: &LayerContext<'_>, cfg: &GaConfig, rng: &mut impl Rng) -> Result<EvolveResult> {
    cfg.validate()?;
    let c = ctx.channels;
    let k = ctx.keep_count()?;

    if k == c {
        // Nothing to prune; the only valid mask is all-ones.
        let best = Chromosome::ones(c);
        let best_error = taylor_error(ctx.hessian, ctx.weights, &best)?;
        return Ok(EvolveResult {
            history: vec![GenerationRecord {
                generation: 0,
                best_error,
                mean_error: best_error,
                best_mask: best.to_hex(),
            }],
            best,
            best_error,
            keep: k,
        });
    }

    let generations = cfg.generations_for(c);
    let mut pop = init_population(c, k as f64 / c as f64, cfg.population, rng)?;
    let mut best_ever: Option<(Chromosome, f64)> = None;
    let mut history = Vec::with_capacity(generations);

    for generation in 0..generations {
        let errors: Vec<f64> = pop
            .individuals
            .par_iter()
            .map(|ind| taylor_error(ctx.hessian, ctx.weights, ind))
            .collect::<Result<_>>()?;
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;

        // Rank by error, ties broken by index, for elites and the log.
        let mut order: Vec<usize> = (0..errors.len()).collect();
        order.sort_by(|&i, &j| errors[i].partial_cmp(&errors[j]).unwrap().then(i.cmp(&j)));
        let gen_best = order[0];
        history.push(GenerationRecord {
            generation,
            best_error: errors[gen_best],
            mean_error: mean,
            best_mask: pop.individuals[gen_best].to_hex(),
        });
        if best_ever
            .as_ref()
            .map_or(true, |(_, e)| errors[gen_best] < *e)
        {
            best_ever = Some((pop.individuals[gen_best].clone(), errors[gen_best]));
        }

        if generation + 1 == generations {
            break;
        }

        let fitness = population_fitness(&errors);
        let mut next = Vec::with_capacity(cfg.population);
        for &e in order.iter().take(cfg.elitism) {
            next.push(pop.individuals[e].clone());
        }
        while next.len() < cfg.population {
            let a = roulette_select(&fitness, rng);
            let b = roulette_select(&fitness, rng);
            let (child, crossed) = crossover_step(
                &pop.individuals[a],
                &pop.individuals[b],
                cfg.crossover_prob,
                rng,
            )?;
            let child = if crossed {
                child
            } else {
                mutate(&child, cfg.mutation_prob, rng)
            };
            next.push(repair(child, k, rng));
        }
        pop = Population {
            individuals: next,
            generation: generation + 1,
        };
    }

    let (best, best_error) = best_ever.expect("at least one generation ran");
    Ok(EvolveResult {
        best,
        best_error,
        keep: k,
        history,
    })
}
