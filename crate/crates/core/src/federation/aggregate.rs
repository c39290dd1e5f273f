//! Server-side weighted averaging.

use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// A surviving client's contribution to one round.
#[derive(Debug, Clone)]
pub struct ClientUpdate<'a> {
    pub client_id: usize,
    pub params: &'a ParamVector,
    pub n_k: usize,
}

/// `w = Σ_k (n_k / n)·w_k`, summed in f64 in ascending client-id order and rounded to f32
/// once, so the result does not depend on the order of `updates`.
pub fn fedavg_aggregate(updates: &[ClientUpdate<'_>]) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no client results to aggregate".into()));
    }
    let mut ordered: Vec<&ClientUpdate<'_>> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    if ordered.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Aggregation("duplicate client id".into()));
    }
    if let Some(u) = ordered.iter().find(|u| u.n_k == 0) {
        return Err(Error::Aggregation(format!(
            "client {} reported n_k = 0",
            u.client_id
        )));
    }
    let first = ordered[0].params;
    for u in &ordered[1..] {
        first.check_congruent(u.params)?;
    }
    let n: f64 = ordered.iter().map(|u| u.n_k as f64).sum();
    let mut acc = vec![0.0f64; first.total_len()];
    for u in &ordered {
        let nk = u.n_k as f64;
        for (a, &w) in acc.iter_mut().zip(u.params.values()) {
            *a += nk * w as f64;
        }
    }
    let mut out = first.zeros_like();
    for (o, a) in out.values_mut().zip(acc) {
        *o = (a / n) as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Segment;

    fn pv(values: &[f32]) -> ParamVector {
        ParamVector::new(vec![
            Segment::new("w", vec![values.len()], values.to_vec()).unwrap()
        ])
        .unwrap()
    }

    #[test]
    fn hand_weighted_mean() {
        let (a, b) = (pv(&[1.0]), pv(&[3.0]));
        let out = fedavg_aggregate(&[
            ClientUpdate {
                client_id: 0,
                params: &a,
                n_k: 1,
            },
            ClientUpdate {
                client_id: 1,
                params: &b,
                n_k: 3,
            },
        ])
        .unwrap();
        assert_eq!(out.segments()[0].data, vec![2.5]);
    }

    #[test]
    fn single_client_is_identity() {
        let a = pv(&[0.1, -7.25e-5, 3.4e12, f32::MIN_POSITIVE]);
        let out = fedavg_aggregate(&[ClientUpdate {
            client_id: 3,
            params: &a,
            n_k: 17,
        }])
        .unwrap();
        assert_eq!(out.to_bytes(), a.to_bytes());
    }

    #[test]
    fn rejects_empty_zero_weight_and_incongruent() {
        assert!(matches!(fedavg_aggregate(&[]), Err(Error::Aggregation(_))));
        let a = pv(&[1.0]);
        let b = pv(&[1.0, 2.0]);
        assert!(fedavg_aggregate(&[ClientUpdate {
            client_id: 0,
            params: &a,
            n_k: 0
        }])
        .is_err());
        assert!(fedavg_aggregate(&[
            ClientUpdate {
                client_id: 0,
                params: &a,
                n_k: 1
            },
            ClientUpdate {
                client_id: 1,
                params: &b,
                n_k: 1
            },
        ])
        .is_err());
    }
}
