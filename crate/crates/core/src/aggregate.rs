//! Server-side weighted aggregation of sparse client deltas.

use crate::error::{Error, Result};
use crate::model::{check_len, ModelSpec, ParamVector};
use crate::sparsify::SparseSelection;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub round: usize,
    pub params: ParamVector,
    pub model_spec: ModelSpec,
}

impl GlobalState {
    pub fn new(params: ParamVector, model_spec: ModelSpec) -> Result<Self> {
        check_len(model_spec.param_count(), params.len())?;
        Ok(Self {
            round: 0,
            params,
            model_spec,
        })
    }
}

/// A decoded update from one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Local sample count `|D_i|`.
    pub weight: u64,
    pub delta: SparseSelection,
}

/// `W(t) = W(t-1) + sum_i w_i * delta_i` with `w_i = |D_i| / sum_j |D_j|` over
/// this round's participants. Updates are folded in ascending client-id
/// order so the result does not depend on arrival order.
pub fn aggregate(global: &GlobalState, updates: &[ClientUpdate]) -> Result<GlobalState> {
    if updates.is_empty() {
        return Err(Error::invalid("aggregation needs at least one update"));
    }
    let n = global.params.len();
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    if let Some(w) = ordered
        .windows(2)
        .find(|w| w[0].client_id == w[1].client_id)
    {
        return Err(Error::invalid(format!(
            "duplicate update from client {}",
            w[0].client_id
        )));
    }
    let mut total: u64 = 0;
    for u in &ordered {
        check_len(n, u.delta.model_len())?;
        if u.weight == 0 {
            return Err(Error::invalid(format!(
                "client {} has zero weight",
                u.client_id
            )));
        }
        total = total
            .checked_add(u.weight)
            .ok_or_else(|| Error::invalid("client weights overflow"))?;
    }

    let mut sum = vec![0.0f64; n];
    for u in ordered {
        let w = u.weight as f64 / total as f64;
        for (i, v) in u.delta.iter() {
            sum[i] += w * v;
        }
    }
    let params: ParamVector = global.params.iter().zip(&sum).map(|(p, s)| p + s).collect();
    if !params.is_finite() {
        return Err(Error::ContractViolation(
            "aggregated model is not finite".into(),
        ));
    }
    Ok(GlobalState {
        round: global.round + 1,
        params,
        model_spec: global.model_spec,
    })
}

/// Current global parameters at full precision.
pub fn broadcast(global: &GlobalState) -> ParamVector {
    global.params.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(params: Vec<f64>) -> GlobalState {
        let spec = ModelSpec::logistic(params.len() - 1, 1);
        GlobalState::new(ParamVector::new(params), spec).unwrap()
    }

    fn upd(
        client_id: usize,
        weight: u64,
        idx: Vec<usize>,
        vals: Vec<f64>,
        len: usize,
    ) -> ClientUpdate {
        ClientUpdate {
            client_id,
            weight,
            delta: SparseSelection::new(idx, vals, 0.0, len).unwrap(),
        }
    }

    #[test]
    fn single_dense_client() {
        let g = state(vec![1.0, 2.0, 3.0]);
        let d = ParamVector::new(vec![0.5, -1.0, 0.25]);
        let out = aggregate(
            &g,
            &[ClientUpdate {
                client_id: 0,
                weight: 17,
                delta: SparseSelection::from_dense(&d).unwrap(),
            }],
        )
        .unwrap();
        assert_eq!(out.params.as_slice(), &[1.5, 1.0, 3.25]);
        assert_eq!(out.round, 1);
    }

    #[test]
    fn equal_weights_average() {
        let g = state(vec![0.0, 0.0]);
        let out = aggregate(
            &g,
            &[
                upd(0, 50, vec![0], vec![2.0], 2),
                upd(1, 50, vec![0], vec![4.0], 2),
            ],
        )
        .unwrap();
        assert_eq!(out.params[0], 3.0);
    }

    #[test]
    fn absent_coordinate_counts_as_zero() {
        let g = state(vec![0.0, 0.0]);
        let out = aggregate(
            &g,
            &[
                upd(0, 100, vec![1], vec![4.0], 2),
                upd(1, 300, vec![], vec![], 2),
            ],
        )
        .unwrap();
        assert_eq!(out.params.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn empty_deltas_are_a_fixed_point() {
        let g = state(vec![0.1, -0.7, 3.3]);
        let out = aggregate(
            &g,
            &[upd(2, 5, vec![], vec![], 3), upd(0, 9, vec![], vec![], 3)],
        )
        .unwrap();
        assert_eq!(out.params, g.params);
    }

    #[test]
    fn order_does_not_matter() {
        let g = state(vec![0.3, 0.2, 0.1]);
        let a = upd(4, 3, vec![0, 2], vec![0.1, 0.7], 3);
        let b = upd(1, 7, vec![0, 1], vec![-0.3, 0.9], 3);
        let c = upd(2, 11, vec![2], vec![1.1], 3);
        let x = aggregate(&g, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = aggregate(&g, &[c, a, b]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rejects_bad_input() {
        let g = state(vec![0.0, 0.0]);
        assert!(aggregate(&g, &[]).is_err());
        assert!(aggregate(&g, &[upd(0, 1, vec![], vec![], 3)]).is_err());
        assert!(aggregate(&g, &[upd(0, 0, vec![], vec![], 2)]).is_err());
        assert!(aggregate(
            &g,
            &[upd(0, 1, vec![], vec![], 2), upd(0, 1, vec![], vec![], 2)]
        )
        .is_err());
    }

    #[test]
    fn broadcast_is_pure() {
        let g = state(vec![1.0, 2.0]);
        let out = aggregate(&g, &[upd(0, 1, vec![0], vec![1.0], 2)]).unwrap();
        assert_eq!(broadcast(&out), out.params);
        assert_eq!(broadcast(&out), broadcast(&out));
        assert_eq!(broadcast(&out).len(), out.model_spec.param_count());
    }
}
