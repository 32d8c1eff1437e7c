//! Closed-form MAC counts of the forward passes, matching what the kernels
//! report through [`crate::macs`].

use crate::error::{Error, Result};
use crate::macs::MacCount;

/// Multi-head attention with `nq` queries over `nk` keys at width `c`.
pub fn mha_cost(nq: u64, nk: u64, c: u64) -> MacCount {
    MacCount { projection: 2 * nq * c * c + 2 * nk * c * c, attention: 2 * nq * nk * c, aggregation: 0 }
}

/// Dense MLP over `rows` inputs with the given layer widths.
pub fn mlp_cost(rows: u64, widths: &[usize]) -> u64 {
    widths.windows(2).map(|w| rows * (w[0] * w[1]) as u64).sum()
}

/// Per-camera cost of one refinement pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineCost {
    pub self_stage: MacCount,
    pub cross_stage: MacCount,
    pub ffn: u64,
}

impl RefineCost {
    pub fn total(&self) -> u64 {
        self.self_stage.total() + self.cross_stage.total() + self.ffn
    }
}

/// `w` columns of `h` rows at width `c`; `ffn_hidden` is the FFN width.
pub fn refine_cost(w: u64, h: u64, c: u64, ffn_hidden: u64) -> RefineCost {
    let per_column = mha_cost(1, h, c);
    RefineCost {
        self_stage: mha_cost(w, w, c),
        cross_stage: MacCount { projection: w * per_column.projection, attention: w * per_column.attention, aggregation: 0 },
        ffn: 2 * w * c * ffn_hidden,
    }
}

/// The single decoder layer: `queries` BEV cells over `keys` keys.
pub fn decoder_cost(queries: u64, keys: u64, c: u64, ffn_hidden: u64) -> MacCount {
    let mut m = mha_cost(queries, keys, c);
    m.projection += 2 * queries * c * ffn_hidden;
    m
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Invalid("exponent fit needs at least two positive (x, y) pairs".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("exponent fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}
