//! C-way K-shot episode sampling over abstract class pools.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Indices into a class pool. `classes[label]` is the pool class behind each
/// local label; support and query entries are `(item, local_label)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EpisodePlan {
    pub c_way: usize,
    pub k_shot: usize,
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl EpisodePlan {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, l)| l).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, l)| l).collect()
    }
}

/// Queries per local label: `n_query / c_way` each, the remainder going to
/// the lowest labels.
pub fn query_counts(n_query: usize, c_way: usize) -> Vec<usize> {
    let (base, extra) = (n_query / c_way, n_query % c_way);
    (0..c_way).map(|c| base + usize::from(c < extra)).collect()
}

/// Independent generator for the `counter`-th episode drawn from `seed`.
pub fn episode_rng(seed: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}

/// Samples one episode. `pool[class]` lists the item ids of each class in the
/// split. Only classes holding at least `k_shot + ceil(n_query / c_way)` items
/// are eligible.
pub fn sample_episode<R: Rng + ?Sized>(
    pool: &[Vec<usize>],
    c_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<EpisodePlan> {
    if c_way == 0 || k_shot == 0 {
        return Err(invalid("c_way and k_shot must be positive"));
    }
    let needed = k_shot + n_query.div_ceil(c_way);
    let eligible: Vec<usize> = (0..pool.len()).filter(|&c| pool[c].len() >= needed).collect();
    if eligible.len() < c_way {
        if pool.len() < c_way {
            return Err(Error::NotEnoughClasses { available: pool.len(), needed: c_way });
        }
        let worst = (0..pool.len()).min_by_key(|&c| pool[c].len()).unwrap_or(0);
        return Err(Error::NotEnoughImages { class: worst, available: pool[worst].len(), needed });
    }
    let classes: Vec<usize> = eligible.choose_multiple(rng, c_way).copied().collect();
    let counts = query_counts(n_query, c_way);
    let mut support = Vec::with_capacity(c_way * k_shot);
    let mut query = Vec::with_capacity(n_query);
    for (label, &class) in classes.iter().enumerate() {
        let mut items = pool[class].clone();
        let take = k_shot + counts[label];
        let (chosen, _) = items.partial_shuffle(rng, take);
        support.extend(chosen[..k_shot].iter().map(|&i| (i, label)));
        query.extend(chosen[k_shot..].iter().map(|&i| (i, label)));
    }
    Ok(EpisodePlan { c_way, k_shot, classes, support, query })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(classes: usize, per: usize) -> Vec<Vec<usize>> {
        (0..classes).map(|c| (c * per..(c + 1) * per).collect()).collect()
    }

    #[test]
    fn sizes_follow_way_and_shot() {
        let p = pool(10, 30);
        let mut rng = episode_rng(0, 0);
        let e = sample_episode(&p, 5, 1, 75, &mut rng).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (5, 75));
        let e = sample_episode(&p, 5, 5, 75, &mut rng).unwrap();
        assert_eq!(e.support.len(), 25);
    }

    #[test]
    fn remainder_goes_to_lowest_labels() {
        assert_eq!(query_counts(7, 5), alloc::vec![2, 2, 1, 1, 1]);
        assert_eq!(query_counts(200, 5), alloc::vec![40; 5]);
    }

    #[test]
    fn shortages_are_reported() {
        let mut rng = episode_rng(1, 0);
        assert_eq!(
            sample_episode(&pool(3, 30), 5, 1, 10, &mut rng),
            Err(Error::NotEnoughClasses { available: 3, needed: 5 })
        );
        assert!(matches!(sample_episode(&pool(6, 3), 5, 1, 15, &mut rng), Err(Error::NotEnoughImages { .. })));
    }

    #[test]
    fn same_stream_same_episode() {
        let p = pool(12, 20);
        let a = sample_episode(&p, 5, 2, 30, &mut episode_rng(7, 3)).unwrap();
        let b = sample_episode(&p, 5, 2, 30, &mut episode_rng(7, 3)).unwrap();
        let c = sample_episode(&p, 5, 2, 30, &mut episode_rng(7, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
