//! FedAvg and its row-gated variant.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ServerError;
use crate::client::LocalUpdate;
use crate::datastore::ClassId;
use crate::nnkernel::HeadParams;
use crate::ClientId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// `(1/k) Σ θ_i`.
    #[default]
    Mean,
    /// `Σ n_i θ_i / Σ n_i` with `n_i` the client's local sample count.
    SizeWeighted,
}

fn sorted(updates: &[LocalUpdate]) -> Result<Vec<&LocalUpdate>, ServerError> {
    let first = updates
        .first()
        .ok_or_else(|| ServerError::Protocol("no client updates to aggregate".into()))?;
    let mut refs: Vec<&LocalUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.client);
    for u in &refs {
        if u.params.dims() != first.params.dims() {
            return Err(ServerError::Aggregation {
                client: u.client,
                reason: format!(
                    "parameter shapes {:?} differ from {:?}",
                    u.params.dims(),
                    first.params.dims()
                ),
            });
        }
    }
    Ok(refs)
}

fn weighted_mean(updates: &[&LocalUpdate], weights: &[f64]) -> HeadParams {
    let mut out = updates[0].params.clone();
    let total: f64 = weights.iter().sum();
    let sources: Vec<Vec<&[f64]>> = updates.iter().map(|u| u.params.tensors()).collect();
    for (t, dst) in out.tensors_mut().into_iter().enumerate() {
        for (j, v) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (src, w) in sources.iter().zip(weights) {
                acc += w * src[t][j];
            }
            *v = acc / total;
        }
    }
    out
}

/// Element-wise mean of the uploaded parameters. Updates are summed in
/// client-id order so the result does not depend on arrival order.
pub fn fedavg(updates: &[LocalUpdate]) -> Result<HeadParams, ServerError> {
    fedavg_with(updates, AggregationMode::Mean)
}

pub fn fedavg_with(updates: &[LocalUpdate], mode: AggregationMode) -> Result<HeadParams, ServerError> {
    let refs = sorted(updates)?;
    let weights: Vec<f64> = match mode {
        AggregationMode::Mean => vec![1.0; refs.len()],
        AggregationMode::SizeWeighted => refs.iter().map(|u| u.n_samples as f64).collect(),
    };
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(ServerError::Protocol("aggregation weights sum to zero".into()));
    }
    Ok(weighted_mean(&refs, &weights))
}

/// Restricts aggregation of a set of classifier rows to the clients that own
/// data for them, for a fixed number of rounds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowGate {
    gated_rows: BTreeSet<ClassId>,
    owners: BTreeSet<ClientId>,
    rounds_remaining: usize,
}

impl RowGate {
    pub fn new(
        gated_rows: BTreeSet<ClassId>,
        owners: BTreeSet<ClientId>,
        rounds: usize,
    ) -> Result<Self, ServerError> {
        if gated_rows.is_empty() {
            return Err(ServerError::Protocol("row gate needs at least one gated row".into()));
        }
        if owners.is_empty() {
            return Err(ServerError::Protocol("row gate needs at least one owner".into()));
        }
        Ok(Self {
            gated_rows,
            owners,
            rounds_remaining: rounds,
        })
    }

    pub fn gated_rows(&self) -> &BTreeSet<ClassId> {
        &self.gated_rows
    }

    pub fn owners(&self) -> &BTreeSet<ClientId> {
        &self.owners
    }

    pub fn rounds_remaining(&self) -> usize {
        self.rounds_remaining
    }

    pub fn is_active(&self) -> bool {
        self.rounds_remaining > 0
    }
}

/// FedAvg over all updates, except that gated classifier rows (weight and
/// bias) are averaged over owners only. With no owner among the updates the
/// gated rows keep their value from `current`. Consumes one gated round.
pub fn row_gated_fedavg(
    updates: &[LocalUpdate],
    gate: &mut RowGate,
    current: &HeadParams,
) -> Result<HeadParams, ServerError> {
    if !gate.is_active() {
        return Err(ServerError::Protocol("row gate has expired".into()));
    }
    let mut out = fedavg(updates)?;
    current
        .check_congruent(&out, "row-gated aggregation")
        .map_err(ServerError::Kernel)?;
    let n_classes = out.n_classes();
    if let Some(&bad) = gate.gated_rows.iter().find(|&&r| r as usize >= n_classes) {
        return Err(ServerError::Protocol(format!(
            "gated row {bad} is outside the {n_classes}-class classifier"
        )));
    }

    let refs = sorted(updates)?;
    let owners: Vec<&LocalUpdate> = refs
        .into_iter()
        .filter(|u| gate.owners.contains(&u.client))
        .collect();
    for &row in &gate.gated_rows {
        let r = row as usize;
        if owners.is_empty() {
            out.cls_w.row_mut(r).copy_from_slice(current.cls_w.row(r));
            out.cls_b[r] = current.cls_b[r];
            continue;
        }
        let k = owners.len() as f64;
        let dst = out.cls_w.row_mut(r);
        for (j, v) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for u in &owners {
                acc += u.params.cls_w.get(r, j);
            }
            *v = acc / k;
        }
        let mut acc = 0.0;
        for u in &owners {
            acc += u.params.cls_b[r];
        }
        out.cls_b[r] = acc / k;
    }
    gate.rounds_remaining -= 1;
    Ok(out)
}
