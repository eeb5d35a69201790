//! Cascaded low-rank compensation shared across bit-width tiers.
//!
//! One factor pair `B [p×r] · A [r×q]` serves every tier. A tier uses the
//! leading `r_b` columns of `B` and rows of `A`, with `r_b` growing from the
//! high tier to the low tier:
//!
//! ```text
//! high: r_h    mid: r_h + r_m    low: r_h + r_m + r_l
//! ```
//!
//! Training the low tier therefore also moves the prefix used by the higher
//! tiers. The fully-shared and independent layouts exist for ablations.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{arg_err, QueptError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    High,
    Mid,
    Low,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::High, Tier::Mid, Tier::Low];

    pub fn index(self) -> usize {
        match self {
            Tier::High => 0,
            Tier::Mid => 1,
            Tier::Low => 2,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::High => "high",
            Tier::Mid => "mid",
            Tier::Low => "low",
        })
    }
}

/// Rank increments per tier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankPartition {
    pub high: usize,
    pub mid: usize,
    pub low: usize,
}

impl RankPartition {
    pub fn new(high: usize, mid: usize, low: usize) -> Result<Self> {
        if high == 0 {
            return arg_err("high-tier rank must be at least 1");
        }
        Ok(Self { high, mid, low })
    }

    pub fn total(&self) -> usize {
        self.high + self.mid + self.low
    }

    pub fn increment(&self, tier: Tier) -> usize {
        match tier {
            Tier::High => self.high,
            Tier::Mid => self.mid,
            Tier::Low => self.low,
        }
    }
}

impl FromStr for RankPartition {
    type Err = QueptError;

    /// Parses `h,m,l`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| QueptError::Argument(format!("rank partition `{s}`: {e}")))?;
        match parts[..] {
            [h, m, l] => Self::new(h, m, l),
            _ => arg_err(format!("rank partition `{s}` needs three values")),
        }
    }
}

impl fmt::Display for RankPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.high, self.mid, self.low)
    }
}

/// Leading-slice width used by `tier` under cascaded sharing.
pub fn effective_rank(tier: Tier, partition: &RankPartition) -> usize {
    match tier {
        Tier::High => partition.high,
        Tier::Mid => partition.high + partition.mid,
        Tier::Low => partition.total(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharingMode {
    /// One pair at full rank for every tier.
    FullyShared,
    /// One disjoint pair per tier, ranked by that tier's increment.
    Independent,
    /// One pair, nested leading slices per tier.
    Cascaded,
}

impl FromStr for SharingMode {
    type Err = QueptError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fully-shared" | "shared" => Ok(Self::FullyShared),
            "independent" => Ok(Self::Independent),
            "cascaded" => Ok(Self::Cascaded),
            other => arg_err(format!("unknown sharing mode `{other}`")),
        }
    }
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SharingMode::FullyShared => "fully-shared",
            SharingMode::Independent => "independent",
            SharingMode::Cascaded => "cascaded",
        })
    }
}

/// One `(A, B)` pair in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Factor {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

/// Low-rank compensation for one `[p×q]` weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadedAdapter {
    mode: SharingMode,
    partition: RankPartition,
    rows: usize,
    cols: usize,
    factors: Vec<Factor>,
}

fn factor_ranks(mode: SharingMode, partition: &RankPartition) -> Result<Vec<usize>> {
    Ok(match mode {
        SharingMode::FullyShared | SharingMode::Cascaded => vec![partition.total()],
        SharingMode::Independent => {
            let ranks = vec![partition.high, partition.mid, partition.low];
            if ranks.contains(&0) {
                return arg_err("independent sharing needs a positive rank for every tier");
            }
            ranks
        }
    })
}

fn factor_names(prefix: &str, k: usize) -> (String, String) {
    (format!("{prefix}.lora{k}.a"), format!("{prefix}.lora{k}.b"))
}

impl CascadedAdapter {
    /// Registers fresh factors: `B = 0`, `A ~ U(−1/√q, 1/√q)`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        shape: (usize, usize),
        partition: RankPartition,
        mode: SharingMode,
        rng: &mut R,
    ) -> Result<Self> {
        let (rows, cols) = shape;
        if partition.total() > rows.min(cols) {
            return arg_err(format!(
                "total rank {} exceeds min({rows}, {cols})",
                partition.total()
            ));
        }
        let bound = T::one() / T::lit(cols as f64).sqrt();
        let mut factors = Vec::new();
        for (k, rank) in factor_ranks(mode, &partition)?.into_iter().enumerate() {
            let (an, bn) = factor_names(prefix, k);
            let a = store.insert(an, Tensor::uniform(&[rank, cols], -bound, bound, rng), true)?;
            let b = store.insert(bn, Tensor::zeros(&[rows, rank]), true)?;
            factors.push(Factor { a, b, rank });
        }
        Ok(Self {
            mode,
            partition,
            rows,
            cols,
            factors,
        })
    }

    /// Re-binds factors already present in `store` (e.g. after loading).
    pub fn attach<T: Scalar>(
        store: &ParamStore<T>,
        prefix: &str,
        shape: (usize, usize),
        partition: RankPartition,
        mode: SharingMode,
    ) -> Result<Self> {
        let (rows, cols) = shape;
        let mut factors = Vec::new();
        for (k, rank) in factor_ranks(mode, &partition)?.into_iter().enumerate() {
            let (an, bn) = factor_names(prefix, k);
            let lookup = |n: &str| {
                store
                    .id_of(n)
                    .ok_or_else(|| QueptError::Format(format!("missing adapter tensor `{n}`")))
            };
            let (a, b) = (lookup(&an)?, lookup(&bn)?);
            if store.value(a).shape() != [rank, cols] || store.value(b).shape() != [rows, rank] {
                return Err(QueptError::Format(format!("adapter `{prefix}` factor {k} has wrong shape")));
            }
            factors.push(Factor { a, b, rank });
        }
        Ok(Self {
            mode,
            partition,
            rows,
            cols,
            factors,
        })
    }

    pub fn mode(&self) -> SharingMode {
        self.mode
    }

    pub fn partition(&self) -> RankPartition {
        self.partition
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// Factor and leading rank serving `tier`.
    pub fn route(&self, tier: Tier) -> (Factor, usize) {
        match self.mode {
            SharingMode::Cascaded => (self.factors[0], effective_rank(tier, &self.partition)),
            SharingMode::FullyShared => (self.factors[0], self.partition.total()),
            SharingMode::Independent => {
                let f = self.factors[tier.index()];
                (f, f.rank)
            }
        }
    }

    /// `B[:, :r] · A[:r, :]` for the tier's route, recorded on `tape`.
    pub fn compensation<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tier: Tier) -> Result<Var> {
        let (f, r) = self.route(tier);
        let a = tape.param(store, f.a);
        let b = tape.param(store, f.b);
        let (a, b) = if r < f.rank {
            (tape.slice_rows(a, 0, r)?, tape.slice_cols(b, 0, r)?)
        } else {
            (a, b)
        };
        tape.matmul(b, a)
    }

    pub fn compensation_value<T: Scalar>(&self, store: &ParamStore<T>, tier: Tier) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = self.compensation(&mut tape, store, tier)?;
        Ok(tape.value(v).clone())
    }

    /// The sliced `(A[:r,:], B[:,:r])` values for a tier.
    pub fn slice_values<T: Scalar>(&self, store: &ParamStore<T>, tier: Tier) -> Result<(Tensor<T>, Tensor<T>)> {
        let (f, r) = self.route(tier);
        Ok((
            store.value(f.a).slice_rows(0, r)?,
            store.value(f.b).slice_cols(0, r)?,
        ))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.factors.iter().flat_map(|f| [f.a, f.b]).collect()
    }
}
