//! Multi-bit token merging: builds the next block's quantized input from the
//! current block's outputs at the three sampled bit-widths.
//!
//! Tokens whose high- and low-bit features agree (cosine similarity) are
//! anchored at high precision; the rest are fused
//! `λ₁·x_h + λ₂·x_m + λ₃·x_l`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, QueptError, Result};
use crate::scalar::Scalar;
use crate::tensor::{cosine_sim_rows, ks_statistic, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeCase {
    /// Each token copies one of the three rows at random.
    RandomSelection,
    /// Every token is the 1:1:1 average.
    UniformFusion,
    /// Anchor the most robust tokens at high precision, fuse the rest.
    SelectiveMerge,
}

impl FromStr for MergeCase {
    type Err = QueptError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "random-selection" | "case1" | "1" => Ok(Self::RandomSelection),
            "uniform" | "uniform-fusion" | "case2" | "2" => Ok(Self::UniformFusion),
            "selective" | "selective-merge" | "case3" | "3" => Ok(Self::SelectiveMerge),
            other => arg_err(format!("unknown merge case `{other}`")),
        }
    }
}

impl fmt::Display for MergeCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeCase::RandomSelection => "random-selection",
            MergeCase::UniformFusion => "uniform-fusion",
            MergeCase::SelectiveMerge => "selective-merge",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergePolicy {
    pub case: MergeCase,
    /// Anchor fraction (selective merge only).
    pub p: f64,
    /// Fusion weights for (high, mid, low), normalized to sum 1.
    pub lambdas: [f64; 3],
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self {
            case: MergeCase::SelectiveMerge,
            p: 0.5,
            lambdas: [1.0 / 3.0; 3],
        }
    }
}

impl MergePolicy {
    pub fn new(case: MergeCase, p: f64, lambdas: [f64; 3]) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return arg_err(format!("anchor fraction {p} outside [0, 1]"));
        }
        if lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return arg_err(format!("fusion weights must be non-negative, got {lambdas:?}"));
        }
        let total: f64 = lambdas.iter().sum();
        if total <= 0.0 {
            return arg_err("fusion weights sum to zero");
        }
        Ok(Self {
            case,
            p,
            lambdas: lambdas.map(|l| l / total),
        })
    }

    pub fn case(case: MergeCase) -> Self {
        Self {
            case,
            ..Self::default()
        }
    }
}

/// Token indices kept at high precision, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AnchorSet {
    indices: Vec<usize>,
}

impl AnchorSet {
    pub fn new(mut indices: Vec<usize>, tokens: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= tokens) {
            return arg_err(format!("anchor index {bad} out of range for {tokens} tokens"));
        }
        Ok(Self { indices })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `round(p·t)` tokens with the highest high/low cosine similarity; ties go
/// to the lower index.
pub fn select_anchors<T: Scalar>(x_h: &Tensor<T>, x_l: &Tensor<T>, p: f64) -> Result<AnchorSet> {
    let sims = cosine_sim_rows(x_h, x_l)?;
    let t = sims.len();
    let k = ((p.clamp(0.0, 1.0) * t as f64).round_ties_even() as usize).min(t);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&i, &j| sims[j].partial_cmp(&sims[i]).expect("finite similarity").then(i.cmp(&j)));
    order.truncate(k);
    AnchorSet::new(order, t)
}

fn check_triplet<T: Scalar>(x_l: &Tensor<T>, x_m: &Tensor<T>, x_h: &Tensor<T>) -> Result<()> {
    x_h.same_shape(x_m, "merge")?;
    x_h.same_shape(x_l, "merge")?;
    if x_h.shape().len() != 2 {
        return Err(QueptError::Dimension {
            op: "merge",
            lhs: x_h.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(())
}

/// Merges three `[t×d]` feature maps into one of the same shape.
pub fn merge<T: Scalar, R: Rng + ?Sized>(
    x_l: &Tensor<T>,
    x_m: &Tensor<T>,
    x_h: &Tensor<T>,
    phi: &AnchorSet,
    policy: &MergePolicy,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_triplet(x_l, x_m, x_h)?;
    let (t, d) = (x_h.rows(), x_h.cols());
    if let Some(&bad) = phi.indices().iter().find(|&&i| i >= t) {
        return arg_err(format!("anchor index {bad} out of range for {t} tokens"));
    }
    let mut out = Vec::with_capacity(t * d);
    match policy.case {
        MergeCase::RandomSelection => {
            for k in 0..t {
                let src = match rng.gen_range(0..3) {
                    0 => x_h,
                    1 => x_m,
                    _ => x_l,
                };
                out.extend_from_slice(src.row(k));
            }
        }
        MergeCase::UniformFusion => {
            let three = T::lit(3.0);
            for k in 0..t {
                let rows = x_h.row(k).iter().zip(x_m.row(k)).zip(x_l.row(k));
                out.extend(rows.map(|((&a, &b), &c)| (a + b + c) / three));
            }
        }
        MergeCase::SelectiveMerge => {
            let lam = policy.lambdas.map(T::lit);
            let mut anchored = vec![false; t];
            phi.indices().iter().for_each(|&i| anchored[i] = true);
            for (k, &is_anchor) in anchored.iter().enumerate() {
                if is_anchor {
                    out.extend_from_slice(x_h.row(k));
                } else {
                    fuse_row(&mut out, x_h.row(k), x_m.row(k), x_l.row(k), lam);
                }
            }
        }
    }
    Tensor::new(x_h.shape().to_vec(), out)
}

fn fuse_row<T: Scalar>(out: &mut Vec<T>, h: &[T], m: &[T], l: &[T], lam: [T; 3]) {
    for ((&a, &b), &c) in h.iter().zip(m).zip(l) {
        let v = lam[0] * a + lam[1] * b + lam[2] * c;
        // keep the convex combination inside the hull despite rounding
        let lo = a.min(b).min(c);
        let hi = a.max(b).max(c);
        out.push(v.max(lo).min(hi));
    }
}

/// Anchor selection plus merge, applied independently to each
/// `tokens`-row sequence of a stacked `[n·t × d]` batch.
pub fn merge_batch<T: Scalar, R: Rng + ?Sized>(
    x_l: &Tensor<T>,
    x_m: &Tensor<T>,
    x_h: &Tensor<T>,
    tokens: usize,
    policy: &MergePolicy,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_triplet(x_l, x_m, x_h)?;
    if tokens == 0 || !x_h.rows().is_multiple_of(tokens) {
        return arg_err(format!("{} rows do not split into sequences of {tokens}", x_h.rows()));
    }
    let mut data = Vec::with_capacity(x_h.numel());
    for s in 0..x_h.rows() / tokens {
        let (a, b) = (s * tokens, (s + 1) * tokens);
        let (l, m, h) = (x_l.slice_rows(a, b)?, x_m.slice_rows(a, b)?, x_h.slice_rows(a, b)?);
        let phi = match policy.case {
            MergeCase::SelectiveMerge => select_anchors(&h, &l, policy.p)?,
            _ => AnchorSet::empty(),
        };
        data.extend(merge(&l, &m, &h, &phi, policy, rng)?.into_data());
    }
    Tensor::new(x_h.shape().to_vec(), data)
}

/// Per-token K-S statistic between full-precision and quantized features,
/// sorted descending (ties by index).
pub fn token_divergence_report<T: Scalar>(x_fp: &Tensor<T>, x_q: &Tensor<T>) -> Result<Vec<(usize, T)>> {
    x_fp.same_shape(x_q, "token_divergence_report")?;
    let mut out = (0..x_fp.rows())
        .map(|k| Ok((k, ks_statistic(x_fp.row(k), x_q.row(k))?)))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    Ok(out)
}
