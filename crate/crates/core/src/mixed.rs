//! Training-free mixed-precision allocation.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibratedModel, LayerBits};
use crate::deploy::BitConfig;
use crate::error::{arg_err, QueptError, Result};
use crate::quantizer::BitWidth;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-10;

/// Largest instance `allocate_bruteforce` will enumerate.
pub const BRUTEFORCE_LIMIT: u64 = 10_000_000;

/// Per-layer, per-bit sensitivity scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityTable<T> {
    bits: Vec<BitWidth>,
    /// `values[layer][j]` is the score of `bits[j]`.
    values: Vec<Vec<T>>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    layer: usize,
    bit: u32,
    kl: f64,
}

impl<T: Scalar> SensitivityTable<T> {
    pub fn new(mut bits: Vec<BitWidth>, values: Vec<Vec<T>>) -> Result<Self> {
        if bits.is_empty() || values.is_empty() {
            return arg_err("sensitivity table needs at least one layer and one bit-width");
        }
        let mut sorted = bits.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != bits {
            return arg_err("sensitivity bit-widths must be strictly increasing");
        }
        for (l, row) in values.iter().enumerate() {
            if row.len() != bits.len() {
                return arg_err(format!("layer {l} has {} entries for {} bit-widths", row.len(), bits.len()));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= T::zero())) {
                return arg_err(format!("layer {l} has invalid sensitivity {v}"));
            }
        }
        bits.shrink_to_fit();
        Ok(Self { bits, values })
    }

    pub fn bits(&self) -> &[BitWidth] {
        &self.bits
    }

    pub fn layers(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, layer: usize) -> &[T] {
        &self.values[layer]
    }

    pub fn get(&self, layer: usize, b: BitWidth) -> Option<T> {
        let j = self.bits.iter().position(|&x| x == b)?;
        Some(self.values[layer][j])
    }

    /// Writes `layer,bit,kl` rows in layer-major order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (layer, row) in self.values.iter().enumerate() {
            for (b, v) in self.bits.iter().zip(row) {
                w.serialize(CsvRow {
                    layer,
                    bit: b.bits(),
                    kl: v.to_f64_lossy(),
                })
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(input).deserialize() {
            let r: CsvRow = rec.map_err(csv_err)?;
            rows.push((r.layer, BitWidth::new(r.bit)?, r.kl));
        }
        let mut bits: Vec<BitWidth> = rows.iter().map(|r| r.1).collect();
        bits.sort_unstable();
        bits.dedup();
        let layers = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let mut values = vec![vec![None; bits.len()]; layers];
        for (l, b, v) in rows {
            let j = bits.binary_search(&b).unwrap();
            if values[l][j].replace(T::lit(v)).is_some() {
                return Err(QueptError::Format(format!("duplicate entry for layer {l}, bit {b}")));
            }
        }
        let values = values
            .into_iter()
            .enumerate()
            .map(|(l, row)| {
                row.into_iter()
                    .collect::<Option<Vec<T>>>()
                    .ok_or_else(|| QueptError::Format(format!("layer {l} is missing bit-widths")))
            })
            .collect::<Result<_>>()?;
        Self::new(bits, values)
    }
}

fn csv_err(e: csv::Error) -> QueptError {
    QueptError::Format(format!("sensitivity csv: {e}"))
}

/// Average weight bit-width target over `layers` layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub target: f64,
    pub layers: usize,
}

impl Budget {
    pub fn new(target: f64, layers: usize) -> Result<Self> {
        if layers == 0 || !target.is_finite() {
            return arg_err("budget needs a finite target and at least one layer");
        }
        Ok(Self { target, layers })
    }

    /// `⌊target · L⌋`, tolerant of decimal targets like 2.3 that land just
    /// below an integer product.
    pub fn total_bits(&self) -> u64 {
        (self.target * self.layers as f64 + 1e-9).floor().max(0.0) as u64
    }

    fn check(&self, bits: &[BitWidth]) -> Result<u64> {
        let (lo, hi) = (bits[0].bits() as f64, bits[bits.len() - 1].bits() as f64);
        if self.target < lo {
            return Err(QueptError::Infeasible(format!(
                "average of {} bits is below the smallest bit-width {lo}",
                self.target
            )));
        }
        if self.target > hi {
            return arg_err(format!("average of {} bits exceeds the largest bit-width {hi}", self.target));
        }
        Ok(self.total_bits())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation<T> {
    pub bits: Vec<BitWidth>,
    pub objective: T,
}

impl<T: Scalar> Allocation<T> {
    fn from_bits(table: &SensitivityTable<T>, bits: Vec<BitWidth>) -> Self {
        let objective = bits
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (l, &b)| acc + table.get(l, b).unwrap());
        Self { bits, objective }
    }

    pub fn total_bits(&self) -> u64 {
        self.bits.iter().map(|b| b.bits() as u64).sum()
    }

    pub fn average(&self) -> f64 {
        self.total_bits() as f64 / self.bits.len() as f64
    }

    /// Weight-only bit config for `configure`.
    pub fn to_bit_config(&self) -> BitConfig {
        BitConfig::PerLayer(
            self.bits
                .iter()
                .map(|&b| LayerBits {
                    weight: Some(b),
                    act: None,
                })
                .collect(),
        )
    }
}

fn check_instance<T: Scalar>(table: &SensitivityTable<T>, budget: &Budget) -> Result<u64> {
    if table.layers() != budget.layers {
        return arg_err(format!(
            "budget is for {} layers, table has {}",
            budget.layers,
            table.layers()
        ));
    }
    budget.check(table.bits())
}

/// Minimizes total sensitivity subject to `Σ b_ℓ ≤ ⌊target · L⌋`.
///
/// Among equal optima the lexicographically largest assignment wins, i.e.
/// higher bits go to earlier layers.
pub fn allocate_dp<T: Scalar>(table: &SensitivityTable<T>, budget: &Budget) -> Result<Allocation<T>> {
    let total = check_instance(table, budget)?;
    let (layers, bits) = (table.layers(), table.bits());
    let min_bit = bits[0].bits() as u64;
    // no assignment can use more than this, so larger budgets are equivalent
    let cap = total.min(layers as u64 * bits[bits.len() - 1].bits() as u64) as usize;
    // best[l][k]: optimum of layers l.. with k bits left; None if infeasible
    let mut best = vec![vec![None::<T>; cap + 1]; layers + 1];
    best[layers].iter_mut().for_each(|v| *v = Some(T::zero()));
    for l in (0..layers).rev() {
        for k in 0..=cap {
            let mut acc: Option<T> = None;
            for (j, b) in bits.iter().enumerate() {
                let b = b.bits() as usize;
                if b > k {
                    break;
                }
                if let Some(rest) = best[l + 1][k - b] {
                    let v = table.row(l)[j] + rest;
                    if acc.is_none_or(|a| v < a) {
                        acc = Some(v);
                    }
                }
            }
            best[l][k] = acc;
        }
    }
    if best[0][cap].is_none() {
        return Err(QueptError::Infeasible(format!(
            "{total} total bits cannot cover {layers} layers at {min_bit} bits"
        )));
    }
    let mut chosen = Vec::with_capacity(layers);
    let mut k = cap;
    for l in 0..layers {
        let target = best[l][k].unwrap();
        let b = bits
            .iter()
            .enumerate()
            .rev()
            .find(|&(j, b)| {
                let b = b.bits() as usize;
                b <= k && best[l + 1][k - b].is_some_and(|rest| table.row(l)[j] + rest == target)
            })
            .map(|(_, b)| *b)
            .expect("dp table is consistent");
        chosen.push(b);
        k -= b.bits() as usize;
    }
    Ok(Allocation::from_bits(table, chosen))
}

/// Exhaustive search with the same feasibility rule and tie-break as
/// [`allocate_dp`].
pub fn allocate_bruteforce<T: Scalar>(table: &SensitivityTable<T>, budget: &Budget) -> Result<Allocation<T>> {
    let total = check_instance(table, budget)?;
    let (layers, bits) = (table.layers(), table.bits());
    let size = (bits.len() as u64).checked_pow(layers as u32).filter(|&s| s <= BRUTEFORCE_LIMIT);
    if size.is_none() {
        return Err(QueptError::TooLarge(format!(
            "{}^{layers} assignments exceed the enumeration limit",
            bits.len()
        )));
    }
    // digits index bits from the top, so enumeration is in descending
    // lexicographic order and the first optimum found is the tie-break winner
    let top = bits.len() - 1;
    let mut digits = vec![0usize; layers];
    let mut best: Option<(T, Vec<usize>)> = None;
    loop {
        let used: u64 = digits.iter().map(|&d| bits[top - d].bits() as u64).sum();
        if used <= total {
            let obj = digits
                .iter()
                .enumerate()
                .fold(T::zero(), |acc, (l, &d)| acc + table.row(l)[top - d]);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, digits.clone()));
            }
        }
        let mut pos = layers;
        loop {
            if pos == 0 {
                let (_, d) = best.ok_or_else(|| {
                    QueptError::Infeasible(format!("no assignment fits in {total} total bits"))
                })?;
                return Ok(Allocation::from_bits(table, d.iter().map(|&d| bits[top - d]).collect()));
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] <= top {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// Mean over rows of `KL(softmax(p) ‖ softmax(q))` with probabilities
/// floored at [`PROB_FLOOR`].
pub fn kl_rows<T: Scalar>(p_logits: &Tensor<T>, q_logits: &Tensor<T>) -> Result<T> {
    p_logits.same_shape(q_logits, "kl_rows")?;
    let floor = PROB_FLOOR;
    let softmax = |row: &[T]| -> Vec<f64> {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64_lossy()));
        let e: Vec<f64> = row.iter().map(|v| (v.to_f64_lossy() - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| (v / s).max(floor)).collect()
    };
    let rows = p_logits.rows();
    let mut total = 0.0;
    for i in 0..rows {
        let (p, q) = (softmax(p_logits.row(i)), softmax(q_logits.row(i)));
        let kl: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
        total += kl.max(0.0);
    }
    Ok(T::lit(total / rows as f64))
}

/// KL sensitivity of every layer when it alone is weight-quantized at `b`.
pub fn measure_sensitivity<T: Scalar>(cal: &CalibratedModel<T>, x: &Tensor<T>, b: BitWidth) -> Result<Vec<T>> {
    let n = cal.model.check_input(x)?;
    if n == 0 {
        return arg_err("empty calibration set");
    }
    let z_fp = cal.model.forward_fp(x)?;
    let mut out = Vec::with_capacity(cal.layers.len());
    for layer in 0..cal.layers.len() {
        let mut bits = vec![LayerBits::default(); cal.layers.len()];
        bits[layer].weight = Some(b);
        let z_q = cal.forward(x, &bits)?;
        out.push(kl_rows(&z_fp, &z_q)?);
    }
    Ok(out)
}

/// Sensitivities for every bit-width the model was calibrated for.
pub fn sensitivity_table<T: Scalar>(cal: &CalibratedModel<T>, x: &Tensor<T>) -> Result<SensitivityTable<T>> {
    let bits = cal.bits();
    let cols: Vec<Vec<T>> = bits
        .iter()
        .map(|&b| measure_sensitivity(cal, x, b))
        .collect::<Result<_>>()?;
    let values = (0..cal.layers.len())
        .map(|l| cols.iter().map(|c| c[l]).collect())
        .collect();
    SensitivityTable::new(bits, values)
}
