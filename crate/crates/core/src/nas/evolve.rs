use std::cmp::Ordering;

use rand::Rng;

use super::sort::crowded_cmp;
use crate::error::{Error, Result};
use crate::model::{Gene, Genome};

/// Default per-gene mutation probability: one gene per child on average.
pub fn default_mutation_rate() -> f64 {
    1.0 / Gene::ALL.len() as f64
}

/// Binary tournament: two uniform draws, the crowded-comparison winner
/// (first draw on ties) is returned.
pub fn tournament<R: Rng + ?Sized>(ranks: &[usize], crowding: &[f64], rng: &mut R) -> usize {
    let a = rng.random_range(0..ranks.len());
    let b = rng.random_range(0..ranks.len());
    match crowded_cmp(ranks[a], crowding[a], ranks[b], crowding[b]) {
        Ordering::Greater => b,
        _ => a,
    }
}

/// Uniform crossover: with probability `p_crossover` every gene comes from
/// either parent with equal odds, otherwise the child copies `a`.
pub fn crossover<R: Rng + ?Sized>(a: &Genome, b: &Genome, p_crossover: f64, rng: &mut R) -> Genome {
    let mut child = a.clone();
    if rng.random::<f64>() < p_crossover {
        for gene in Gene::ALL {
            if rng.random::<bool>() {
                child.inherit(gene, b);
            }
        }
    }
    child
}

/// Resamples each gene independently with probability `p_mutation`.
pub fn mutate<R: Rng + ?Sized>(g: &mut Genome, p_mutation: f64, rng: &mut R) {
    for gene in Gene::ALL {
        if rng.random::<f64>() < p_mutation {
            g.resample(gene, rng);
        }
    }
}

/// `count` offspring from tournament-selected parents.
pub fn evolve<R: Rng + ?Sized>(
    population: &[Genome],
    ranks: &[usize],
    crowding: &[f64],
    count: usize,
    p_crossover: f64,
    p_mutation: f64,
    rng: &mut R,
) -> Result<Vec<Genome>> {
    if population.len() < 2 || ranks.len() != population.len() || crowding.len() != population.len() {
        return Err(Error::Contract(format!(
            "evolution needs at least 2 ranked parents, got {}",
            population.len()
        )));
    }
    Ok((0..count)
        .map(|_| {
            let a = tournament(ranks, crowding, rng);
            let b = tournament(ranks, crowding, rng);
            let mut child = crossover(&population[a], &population[b], p_crossover, rng);
            mutate(&mut child, p_mutation, rng);
            child
        })
        .collect())
}
