//! Masking schedule shared by training and decoding.
//!
//! Positions are indices into the `2nj` token region, person a first. The
//! separator is not part of that region and so can never be masked; see
//! [`region_to_sequence`] for the mapping into a full token sequence.

use std::f64::consts::FRAC_PI_2;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Counts are formed as `ceil(gamma * k)`; products that land within this
/// distance above an integer are treated as that integer.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    InteractionA,
    InteractionB,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub strategy: Strategy,
    pub tau: f64,
    /// Sorted region indices.
    pub positions: Vec<usize>,
}

/// `cos(pi tau / 2)`, written as a sine so both endpoints are exact.
pub fn cosine_gamma(tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid(format!("tau {tau} outside [0, 1]")));
    }
    Ok((FRAC_PI_2 * (1.0 - tau)).sin())
}

pub fn mask_count(gamma: f64, pool: usize) -> usize {
    let x = gamma * pool as f64;
    ((x - COUNT_SLACK).ceil().max(0.0) as usize).min(pool)
}

/// Region index to index in the `2nj + 1` sequence with the separator at `nj`.
pub fn region_to_sequence(r: usize, per_person: usize) -> usize {
    if r < per_person {
        r
    } else {
        r + 1
    }
}

fn choose<R: Rng + ?Sized>(pool: usize, count: usize, offset: usize, rng: &mut R) -> Vec<usize> {
    let mut picked: Vec<usize> = index::sample(rng, pool, count).into_iter().map(|i| i + offset).collect();
    picked.sort_unstable();
    picked
}

/// Uniform choice of `ceil(gamma(tau) K)` region positions, at least one.
pub fn random_mask<R: Rng + ?Sized>(k: usize, tau: f64, rng: &mut R) -> Result<MaskPlan> {
    if k == 0 {
        return Err(invalid("cannot mask an empty token region"));
    }
    let count = mask_count(cosine_gamma(tau)?, k).max(1);
    Ok(MaskPlan { strategy: Strategy::Random, tau, positions: choose(k, count, 0, rng) })
}

/// Masks within one person's span only; the partner stays fully visible.
pub fn interaction_mask<R: Rng + ?Sized>(per_person: usize, which: Strategy, tau: f64, rng: &mut R) -> Result<MaskPlan> {
    if per_person == 0 {
        return Err(invalid("cannot mask an empty token region"));
    }
    let offset = match which {
        Strategy::InteractionA => 0,
        Strategy::InteractionB => per_person,
        Strategy::Random => return Err(invalid("interaction_mask needs a person")),
    };
    let count = mask_count(cosine_gamma(tau)?, per_person).max(1);
    Ok(MaskPlan { strategy: which, tau, positions: choose(per_person, count, offset, rng) })
}

pub fn choose_strategy<R: Rng + ?Sized>(p_random: f64, rng: &mut R) -> Result<Strategy> {
    if !(0.0..=1.0).contains(&p_random) {
        return Err(invalid(format!("p_r {p_random} outside [0, 1]")));
    }
    Ok(if rng.random_bool(p_random) {
        Strategy::Random
    } else if rng.random_bool(0.5) {
        Strategy::InteractionA
    } else {
        Strategy::InteractionB
    })
}

/// Draw tau from U(0, 1) and build the first-round mask for a strategy.
pub fn training_mask<R: Rng + ?Sized>(per_person: usize, strategy: Strategy, rng: &mut R) -> Result<MaskPlan> {
    let tau = rng.random_range(0.0..1.0);
    match strategy {
        Strategy::Random => random_mask(2 * per_person, tau, rng),
        s => interaction_mask(per_person, s, tau, rng),
    }
}

/// The `count` lowest-confidence positions, ties to the lower index, sorted.
pub fn lowest_confidence(positions: &[usize], confidences: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]).then(positions[a].cmp(&positions[b])));
    let mut out: Vec<usize> = order.into_iter().take(count).map(|i| positions[i]).collect();
    out.sort_unstable();
    out
}

/// Second-round mask: `tau' ~ U(tau, 1)` and the `ceil(gamma(tau') M)`
/// least confident first-round positions. `confidences[i]` belongs to
/// `plan.positions[i]`.
pub fn step_unroll_remask<R: Rng + ?Sized>(plan: &MaskPlan, confidences: &[f64], rng: &mut R) -> Result<MaskPlan> {
    if confidences.len() != plan.positions.len() {
        return Err(invalid("one confidence per masked position is required"));
    }
    let tau = if plan.tau < 1.0 { rng.random_range(plan.tau..1.0) } else { 1.0 };
    remask_at(plan, confidences, tau)
}

pub fn remask_at(plan: &MaskPlan, confidences: &[f64], tau: f64) -> Result<MaskPlan> {
    let count = mask_count(cosine_gamma(tau)?, plan.positions.len());
    Ok(MaskPlan { strategy: plan.strategy, tau, positions: lowest_confidence(&plan.positions, confidences, count) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assume, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gamma_values() {
        assert_eq!(cosine_gamma(0.0).unwrap(), 1.0);
        assert_eq!(cosine_gamma(1.0).unwrap(), 0.0);
        assert!((cosine_gamma(1.0 / 3.0).unwrap() - 3f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(cosine_gamma(-0.01).is_err() && cosine_gamma(1.01).is_err());
        assert!(cosine_gamma(f64::NAN).is_err());
    }

    #[test]
    fn counts_from_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_mask(160, 0.5, &mut rng).unwrap().positions.len(), 114);
        assert_eq!(random_mask(160, 0.0, &mut rng).unwrap().positions, (0..160).collect::<Vec<_>>());
        let a = interaction_mask(80, Strategy::InteractionA, 0.0, &mut rng).unwrap();
        assert_eq!(a.positions, (0..80).collect::<Vec<_>>());
        let b = interaction_mask(80, Strategy::InteractionB, 0.3, &mut rng).unwrap();
        assert!(b.positions.iter().all(|&p| (80..160).contains(&p)));
        assert_eq!(interaction_mask(80, Strategy::InteractionA, 0.99, &mut rng).unwrap().positions.len(), 2);
        assert_eq!(random_mask(160, 1.0, &mut rng).unwrap().positions.len(), 1);
    }

    #[test]
    fn separator_never_in_region() {
        assert_eq!(region_to_sequence(79, 80), 79);
        assert_eq!(region_to_sequence(80, 80), 81);
        assert_eq!(region_to_sequence(159, 80), 160);
    }

    #[test]
    fn marginal_frequencies_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, tau, draws) = (40, 0.6, 10_000);
        let count = mask_count(cosine_gamma(tau).unwrap(), k);
        let mut hits = vec![0usize; k];
        for _ in 0..draws {
            let plan = random_mask(k, tau, &mut rng).unwrap();
            assert_eq!(plan.positions.len(), count);
            for p in plan.positions {
                hits[p] += 1;
            }
        }
        let p = count as f64 / k as f64;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        // 99% per position, with a Bonferroni split over the 40 positions.
        let z = 3.66;
        for h in hits {
            assert!((h as f64 - p * draws as f64).abs() < z * sd, "{h}");
        }
    }

    #[test]
    fn strategy_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000usize;
        assert!((0..100).all(|_| choose_strategy(1.0, &mut rng).unwrap() == Strategy::Random));
        let draws: Vec<_> = (0..n).map(|_| choose_strategy(0.0, &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|&s| s != Strategy::Random));
        let a = draws.iter().filter(|&&s| s == Strategy::InteractionA).count() as f64;
        assert!((a - 5000.0).abs() < 2.576 * (n as f64 * 0.25).sqrt());
        let r = (0..n).filter(|_| choose_strategy(0.8, &mut rng).unwrap() == Strategy::Random).count() as f64;
        assert!((r - 8000.0).abs() < 2.576 * (n as f64 * 0.16).sqrt());
        assert!(choose_strategy(1.5, &mut rng).is_err());
    }

    #[test]
    fn remask_quarter_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let positions: Vec<usize> = (0..100).map(|i| i * 3 + 1).collect();
        let conf: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let tau = (0.25f64).acos() / FRAC_PI_2;
        let plan = MaskPlan { strategy: Strategy::Random, tau: 0.1, positions: positions.clone() };
        let out = remask_at(&plan, &conf, tau).unwrap();
        assert_eq!(out.positions.len(), 25);
        let mut pairs: Vec<(f64, usize)> = conf.iter().copied().zip(positions).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut expect: Vec<usize> = pairs[..25].iter().map(|p| p.1).collect();
        expect.sort();
        assert_eq!(out.positions, expect);
        assert!(remask_at(&plan, &conf, 1.0).unwrap().positions.is_empty());
    }

    #[test]
    fn remask_ties_take_lower_index() {
        let plan = MaskPlan { strategy: Strategy::Random, tau: 0.0, positions: vec![2, 5, 9, 11] };
        let out = lowest_confidence(&plan.positions, &[0.5, 0.5, 0.5, 0.1], 2);
        assert_eq!(out, vec![2, 11]);
    }

    proptest! {
        #[test]
        fn gamma_strictly_decreasing(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(cosine_gamma(a).unwrap() > cosine_gamma(b).unwrap());
        }

        #[test]
        fn unroll_never_grows(k in 1usize..200, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let strategy = choose_strategy(0.8, &mut rng).unwrap();
            let first = training_mask(k, strategy, &mut rng).unwrap();
            prop_assert!(!first.positions.is_empty());
            prop_assert!(first.positions.iter().all(|&p| p < 2 * k));
            let conf: Vec<f64> = first.positions.iter().map(|_| rng.random_range(0.0..1.0)).collect();
            let second = step_unroll_remask(&first, &conf, &mut rng).unwrap();
            prop_assert!(second.tau >= first.tau);
            prop_assert!(second.positions.len() <= first.positions.len());
            prop_assert!(second.positions.iter().all(|p| first.positions.contains(p)));
        }
    }
}
