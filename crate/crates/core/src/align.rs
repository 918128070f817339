//! Levenshtein alignment over token ids and the imitation weights derived
//! from it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("error index {index} out of range for sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("gamma must be positive and phi in [0, 1] (got gamma={gamma}, phi={phi})")]
    BadCoefficients { gamma: f64, phi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EditKind {
    Match,
    Replace,
    Insert,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    pub src: Option<usize>,
    pub dst: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
}

impl EditScript {
    pub fn cost(&self) -> usize {
        self.ops.iter().filter(|o| o.kind != EditKind::Match).count()
    }

    /// Rebuilds the destination from `src` and `dst`'s inserted/replaced
    /// symbols. Returns `None` if the script does not fit `src`.
    pub fn replay<T: Clone + PartialEq>(&self, src: &[T], dst: &[T]) -> Option<Vec<T>> {
        let mut out = Vec::with_capacity(dst.len());
        let mut next_src = 0;
        for op in &self.ops {
            match op.kind {
                EditKind::Match | EditKind::Replace => {
                    let (s, d) = (op.src?, op.dst?);
                    if s != next_src || d != out.len() {
                        return None;
                    }
                    let sym = src.get(s)?;
                    if op.kind == EditKind::Match {
                        out.push(sym.clone());
                    } else {
                        out.push(dst.get(d)?.clone());
                    }
                    next_src += 1;
                }
                EditKind::Delete => {
                    if op.src? != next_src || op.dst.is_some() {
                        return None;
                    }
                    src.get(next_src)?;
                    next_src += 1;
                }
                EditKind::Insert => {
                    let d = op.dst?;
                    if d != out.len() || op.src.is_some() {
                        return None;
                    }
                    out.push(dst.get(d)?.clone());
                }
            }
        }
        (next_src == src.len()).then_some(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("script serializes")
    }
}

fn table<T: PartialEq>(a: &[T], b: &[T]) -> Vec<Vec<usize>> {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    table(a, b)[a.len()][b.len()]
}

/// A minimum-cost script from `a` to `b`. Among optimal scripts the backtrace
/// prefers MATCH, then REPLACE, then DELETE, then INSERT at every cell.
pub fn align<T: PartialEq>(a: &[T], b: &[T]) -> EditScript {
    let d = table(a, b);
    let (mut i, mut j) = (a.len(), b.len());
    let mut ops = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && a[i - 1] == b[j - 1] && d[i][j] == d[i - 1][j - 1] {
            ops.push(EditOp { kind: EditKind::Match, src: Some(i - 1), dst: Some(j - 1) });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            ops.push(EditOp { kind: EditKind::Replace, src: Some(i - 1), dst: Some(j - 1) });
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(EditOp { kind: EditKind::Delete, src: Some(i - 1), dst: None });
            i -= 1;
        } else {
            ops.push(EditOp { kind: EditKind::Insert, src: None, dst: Some(j - 1) });
            j -= 1;
        }
    }
    ops.reverse();
    EditScript { ops }
}

/// Indices into `rewrite` that were replaced or inserted relative to `sample`.
pub fn error_token_set<T: PartialEq>(sample: &[T], rewrite: &[T]) -> BTreeSet<usize> {
    align(sample, rewrite)
        .ops
        .iter()
        .filter(|o| matches!(o.kind, EditKind::Replace | EditKind::Insert))
        .filter_map(|o| o.dst)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeightVector {
    pub weights: Vec<f64>,
    pub gamma: f64,
    pub phi: f64,
}

/// `gamma` on error tokens, `phi * gamma` elsewhere.
pub fn token_weights(
    len: usize,
    errors: &BTreeSet<usize>,
    gamma: f64,
    phi: f64,
) -> Result<TokenWeightVector, AlignError> {
    if !(gamma > 0.0 && gamma.is_finite()) || !(0.0..=1.0).contains(&phi) {
        return Err(AlignError::BadCoefficients { gamma, phi });
    }
    if let Some(&index) = errors.iter().find(|&&i| i >= len) {
        return Err(AlignError::IndexOutOfRange { index, len });
    }
    let weights = (0..len).map(|j| if errors.contains(&j) { gamma } else { phi * gamma }).collect();
    Ok(TokenWeightVector { weights, gamma, phi })
}
