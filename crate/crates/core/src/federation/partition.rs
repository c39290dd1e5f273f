//! Label-skewed client partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::dirichlet_sample;
use crate::error::{Error, Result};
use crate::labels::{Grade, NUM_GRADES};

const MAX_PARTITION_RETRIES: usize = 1000;

/// One simulated site's share of the training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Indices into the caller's item list, ascending.
    pub indices: Vec<usize>,
    pub class_counts: [usize; NUM_GRADES],
}

impl ClientShard {
    pub fn new(client_id: usize, mut indices: Vec<usize>, labels: &[Grade]) -> ClientShard {
        indices.sort_unstable();
        let mut class_counts = [0; NUM_GRADES];
        for &i in &indices {
            class_counts[labels[i].index()] += 1;
        }
        ClientShard {
            client_id,
            indices,
            class_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per class, draws client proportions from `Dirichlet(alpha)` and deals that class's
/// (shuffled) items out in contiguous runs of `round(n_c · cumulative share)`. Redraws
/// until every client holds at least one item.
pub fn partition_dirichlet(
    labels: &[Grade],
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if n_clients == 0 {
        return Err(Error::Partition("n_clients must be >= 1".into()));
    }
    if labels.len() < n_clients {
        return Err(Error::Partition(format!(
            "{} items cannot cover {n_clients} clients",
            labels.len()
        )));
    }
    let mut by_class: [Vec<usize>; NUM_GRADES] = Default::default();
    for (i, g) in labels.iter().enumerate() {
        by_class[g.index()].push(i);
    }
    if let Some(g) = Grade::ALL.iter().find(|g| by_class[g.index()].is_empty()) {
        return Err(Error::EmptyClass(g.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_PARTITION_RETRIES {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for members in &by_class {
            let mut items = members.clone();
            items.shuffle(&mut rng);
            let shares = dirichlet_sample(alpha, n_clients, &mut rng)?;
            let n = items.len() as f64;
            let mut cum = 0.0;
            let mut start = 0;
            for (k, share) in shares.iter().enumerate() {
                cum += share;
                let end = if k + 1 == n_clients {
                    items.len()
                } else {
                    ((n * cum).round() as usize).clamp(start, items.len())
                };
                assigned[k].extend_from_slice(&items[start..end]);
                start = end;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return Ok(assigned
                .into_iter()
                .enumerate()
                .map(|(k, idx)| ClientShard::new(k, idx, labels))
                .collect());
        }
    }
    Err(Error::Partition(format!(
        "no partition with every client non-empty after {MAX_PARTITION_RETRIES} draws \
         (alpha {alpha}, {} items, {n_clients} clients)",
        labels.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(counts: [usize; 3]) -> Vec<Grade> {
        Grade::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&g, n)| std::iter::repeat_n(g, n))
            .collect()
    }

    #[test]
    fn single_client_gets_everything() {
        let l = labels([5, 6, 7]);
        let shards = partition_dirichlet(&l, 1, 0.5, 3).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].indices, (0..18).collect::<Vec<_>>());
        assert_eq!(shards[0].class_counts, [5, 6, 7]);
    }

    #[test]
    fn deterministic_per_seed() {
        let l = labels([40, 30, 20]);
        assert_eq!(
            partition_dirichlet(&l, 4, 0.5, 9).unwrap(),
            partition_dirichlet(&l, 4, 0.5, 9).unwrap()
        );
        assert_ne!(
            partition_dirichlet(&l, 4, 0.5, 9).unwrap(),
            partition_dirichlet(&l, 4, 0.5, 10).unwrap()
        );
    }

    #[test]
    fn impossible_requests() {
        assert!(matches!(
            partition_dirichlet(&labels([1, 1, 0]), 2, 0.5, 0),
            Err(Error::EmptyClass(_))
        ));
        assert!(partition_dirichlet(&labels([1, 1, 1]), 4, 0.5, 0).is_err());
        assert!(partition_dirichlet(&labels([1, 1, 1]), 0, 0.5, 0).is_err());
    }
}
