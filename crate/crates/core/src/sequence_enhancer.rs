//! Non-uniform subsequences of uniform sequences and the alignment loss
//! between their encodings.

use rand::Rng;
use ufrec_tensor::{Graph, Var};

use crate::config::SeReduction;
use crate::error::{Error, Result};
use crate::model;

/// A subsequence of an unpadded sequence. `retained[k]` is the index in the
/// original of the `k`-th kept interaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedPair {
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub retained: Vec<usize>,
}

/// Keeps every less-frequent interaction; if fewer than `min_len` remain,
/// tops up with frequent ones drawn without replacement. Order is preserved.
pub fn generate_subsequence<R: Rng + ?Sized>(
    items: &[usize],
    timestamps: &[i64],
    is_frequent: impl Fn(usize) -> bool,
    min_len: usize,
    rng: &mut R,
) -> Result<AugmentedPair> {
    if items.is_empty() {
        return Err(Error::InvalidInput("cannot derive a subsequence from an empty sequence".into()));
    }
    let (frequent, mut retained): (Vec<usize>, Vec<usize>) = (0..items.len()).partition(|&i| is_frequent(items[i]));
    if retained.len() < min_len {
        let need = (min_len - retained.len()).min(frequent.len());
        let picks = rand::seq::index::sample(rng, frequent.len(), need);
        retained.extend(picks.iter().map(|k| frequent[k]));
        retained.sort_unstable();
    }
    Ok(AugmentedPair {
        items: retained.iter().map(|&i| items[i]).collect(),
        timestamps: retained.iter().map(|&i| timestamps[i]).collect(),
        retained,
    })
}

/// Weighted alignment loss between the original encoding and the generator
/// applied to the derived encoding. Both encodings are `N × 2d` over
/// left-padded sequences of lengths `original_len` and `retained.len()`.
pub fn alignment_loss(
    g: &mut Graph,
    original: Var,
    derived: Var,
    original_len: usize,
    retained: &[usize],
    weight: f64,
    reduction: SeReduction,
) -> Result<Var> {
    let n = g.value(original).shape()[0];
    let (orig_rows, derived_rows): (Vec<usize>, Vec<usize>) = match reduction {
        SeReduction::Last => (vec![n - 1], vec![n - 1]),
        SeReduction::Mean => {
            let off_o = n - original_len;
            let off_d = n - retained.len();
            retained.iter().enumerate().map(|(k, &r)| (off_o + r, off_d + k)).unzip()
        }
    };
    let q = g.gather_rows(original, &orig_rows)?;
    let q_hat = g.gather_rows(derived, &derived_rows)?;
    let mapped = model::generator(g, q_hat)?;
    let diff = g.sub(q, mapped)?;
    let sq = g.sum_sq(diff);
    Ok(g.scale(sq, weight / orig_rows.len() as f64))
}
