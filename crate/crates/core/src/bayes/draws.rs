//! Posterior draw storage, convergence diagnostics and the columnar layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forced::ForcedModelSpec;
use super::null::{NullModelData, NullModelSpec};
use super::McmcConfig;
use crate::envelope::ChangePoints;
use crate::error::{DemandError, Result};
use crate::model::{CovariatePath, DemandCurve};

pub const RHAT_WARNING: f64 = 1.1;
const MAGIC: &[u8; 8] = b"SDDRAWS\0";
const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarDiagnostic {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub rhat: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub chain: usize,
    pub block: String,
    pub rate: f64,
}

/// What produced the draws; enough to refit or predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    Null {
        data: NullModelData,
        spec: NullModelSpec,
        config: McmcConfig,
    },
    Forced {
        curve: DemandCurve,
        covariates: CovariatePath,
        spec: ForcedModelSpec,
        config: McmcConfig,
        changepoints: ChangePoints,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    /// Scalar names such as `theta[0,1,0]`; the prefix before `[` is the block.
    pub names: Vec<String>,
    /// `chains[c][d][k]` is scalar `k` of draw `d` in chain `c`.
    pub chains: Vec<Vec<Vec<f64>>>,
    pub acceptance: Vec<BlockAcceptance>,
    pub diagnostics: Vec<ScalarDiagnostic>,
    pub warnings: Vec<String>,
    pub model: FittedModel,
}

impl PosteriorDraws {
    pub(crate) fn assemble(
        names: Vec<String>,
        chains: Vec<Vec<Vec<f64>>>,
        acceptance: Vec<BlockAcceptance>,
        model: FittedModel,
    ) -> Self {
        let diagnostics: Vec<ScalarDiagnostic> = (0..names.len())
            .map(|k| {
                let per_chain: Vec<Vec<f64>> = chains
                    .iter()
                    .map(|c| c.iter().map(|d| d[k]).collect())
                    .collect();
                let pooled: Vec<f64> = per_chain.iter().flatten().copied().collect();
                let (mean, sd) = mean_sd(&pooled);
                ScalarDiagnostic {
                    name: names[k].clone(),
                    mean,
                    sd,
                    rhat: split_rhat(&per_chain),
                    ess: effective_sample_size(&per_chain),
                }
            })
            .collect();
        let flagged: Vec<&str> = diagnostics
            .iter()
            .filter(|d| !(d.rhat <= RHAT_WARNING))
            .map(|d| d.name.as_str())
            .collect();
        let mut warnings = Vec::new();
        if !flagged.is_empty() {
            warnings.push(format!(
                "split R-hat above {RHAT_WARNING} for {}",
                flagged.join(", ")
            ));
        }
        Self { names, chains, acceptance, diagnostics, warnings, model }
    }

    /// Rebuilds draws read back from disk; diagnostics are recomputed.
    pub fn from_parts(
        names: Vec<String>,
        chains: Vec<Vec<Vec<f64>>>,
        acceptance: Vec<BlockAcceptance>,
        model: FittedModel,
    ) -> Result<Self> {
        if chains.is_empty() || chains.iter().flatten().any(|d| d.len() != names.len()) {
            return Err(DemandError::Configuration("draws do not match their names".into()));
        }
        let per_chain = chains[0].len();
        if per_chain == 0 || chains.iter().any(|c| c.len() != per_chain) {
            return Err(DemandError::Configuration("chains differ in length".into()));
        }
        Ok(Self::assemble(names, chains, acceptance, model))
    }

    pub fn chain_count(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// All chains concatenated for one scalar.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.index_of(name)?;
        Some(self.chains.iter().flatten().map(|d| d[k]).collect())
    }

    pub fn pooled(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.chains.iter().flatten()
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.diagnostics.iter().find(|d| d.name == name).map(|d| d.mean)
    }

    /// Posterior mean of every scalar, in `names` order.
    pub fn means(&self) -> Vec<f64> {
        self.diagnostics.iter().map(|d| d.mean).collect()
    }

    pub fn max_rhat(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.rhat).fold(1.0, f64::max)
    }

    /// Scalar indices grouped by block name, in first-seen order.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (k, name) in self.names.iter().enumerate() {
            let block = block_of(name);
            match out.iter_mut().find(|(b, _)| b == block) {
                Some((_, idx)) => idx.push(k),
                None => out.push((block.to_string(), vec![k])),
            }
        }
        out
    }

    /// Writes one file per block plus `index.json`.
    pub fn write_columnar(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_error)?;
        let mut index = BTreeMap::new();
        for (block, cols) in self.blocks() {
            let file = format!("{block}.f64");
            let mut bytes = Vec::with_capacity(40 + 8 * cols.len() * self.pooled().count());
            bytes.extend_from_slice(MAGIC);
            bytes.extend_from_slice(&LAYOUT_VERSION.to_le_bytes());
            bytes.extend_from_slice(&3u32.to_le_bytes());
            for dim in [self.chain_count(), self.draws_per_chain(), cols.len()] {
                bytes.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for draw in self.pooled() {
                for &k in &cols {
                    bytes.extend_from_slice(&draw[k].to_le_bytes());
                }
            }
            let mut f = fs::File::create(dir.join(&file)).map_err(io_error)?;
            f.write_all(&bytes).map_err(io_error)?;
            let names: Vec<&str> = cols.iter().map(|&k| self.names[k].as_str()).collect();
            index.insert(block, (file, names));
        }
        let index = serde_json::json!({ "names": self.names, "blocks": index });
        let index_json = serde_json::to_vec_pretty(&index)
            .map_err(|e| DemandError::Configuration(e.to_string()))?;
        fs::write(dir.join("index.json"), index_json).map_err(io_error)
    }
}

/// Reads a directory written by [`PosteriorDraws::write_columnar`] back to
/// scalar names and `chains[c][d][k]`.
pub fn read_columnar(dir: &Path) -> Result<(Vec<String>, Vec<Vec<Vec<f64>>>)> {
    #[derive(Deserialize)]
    struct Index {
        names: Vec<String>,
        blocks: BTreeMap<String, (String, Vec<String>)>,
    }
    let raw = fs::read(dir.join("index.json")).map_err(io_error)?;
    let index: Index =
        serde_json::from_slice(&raw).map_err(|e| DemandError::Configuration(e.to_string()))?;
    // Source of each name: (block number, column within block).
    let mut source: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut blocks: Vec<(usize, usize, Vec<f64>, usize)> = Vec::new();
    for (file, block_names) in index.blocks.into_values() {
        let mut f = fs::File::open(dir.join(&file)).map_err(io_error)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(io_error)?;
        let (chains, draws, width, values) = parse_block(&bytes, &file)?;
        if width != block_names.len() {
            return Err(DemandError::Configuration(format!(
                "{file}: header width {width} but index lists {} names",
                block_names.len()
            )));
        }
        for (k, name) in block_names.into_iter().enumerate() {
            source.insert(name, (blocks.len(), k));
        }
        blocks.push((chains, draws, values, width));
    }
    let (chains, draws) = blocks.first().map_or((0, 0), |c| (c.0, c.1));
    if blocks.iter().any(|c| c.0 != chains || c.1 != draws) {
        return Err(DemandError::Configuration("blocks disagree on draw shape".into()));
    }
    let order: Vec<(usize, usize)> = index
        .names
        .iter()
        .map(|n| {
            source
                .get(n)
                .copied()
                .ok_or_else(|| DemandError::Configuration(format!("no column stored for {n}")))
        })
        .collect::<Result<_>>()?;
    if order.len() != source.len() {
        return Err(DemandError::Configuration("index names and blocks disagree".into()));
    }
    let mut out = vec![vec![Vec::with_capacity(order.len()); draws]; chains];
    for (c, chain) in out.iter_mut().enumerate() {
        for (d, row) in chain.iter_mut().enumerate() {
            for &(b, k) in &order {
                let (_, _, values, width) = &blocks[b];
                row.push(values[(c * draws + d) * width + k]);
            }
        }
    }
    Ok((index.names, out))
}

fn parse_block(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bad = |what: &str| DemandError::Configuration(format!("{file}: {what}"));
    if bytes.len() < 40 || &bytes[..8] != MAGIC {
        return Err(bad("not a draws file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes")) as usize;
    if u32_at(8) != LAYOUT_VERSION || u32_at(12) != 3 {
        return Err(bad("unsupported layout"));
    }
    let (chains, draws, width) = (u64_at(16), u64_at(24), u64_at(32));
    let body = &bytes[40..];
    if body.len() != 8 * chains * draws * width {
        return Err(bad("truncated body"));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((chains, draws, width, values))
}

fn io_error(e: std::io::Error) -> DemandError {
    DemandError::Configuration(format!("draw files: {e}"))
}

pub fn block_of(name: &str) -> &str {
    name.split('[').next().unwrap_or(name)
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Split-chain potential scale reduction.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let half = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    if half < 2 {
        return f64::NAN;
    }
    let pieces: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[c.len() - half..]])
        .collect();
    let n = half as f64;
    let stats: Vec<(f64, f64)> = pieces.iter().map(|p| mean_sd(p)).collect();
    let w = stats.iter().map(|(_, s)| s * s).sum::<f64>() / stats.len() as f64;
    let means: Vec<f64> = stats.iter().map(|(m, _)| *m).collect();
    let (_, between_sd) = mean_sd(&means);
    let b = n * between_sd * between_sd;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let m = chains.len();
    if n < 4 || m == 0 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| {
                (0..n - lag).map(|i| (c[i] - mu) * (c[i + lag] - mu)).sum::<f64>() / n as f64
            })
            .sum::<f64>()
            / m as f64
    };
    let acov0 = acov(0);
    let w = acov0 * n as f64 / (n as f64 - 1.0);
    let b_over_n = if m > 1 { mean_sd(&means).1.powi(2) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if var_plus == 0.0 {
        return (m * n) as f64;
    }
    let rho = |lag: usize| 1.0 - (w - acov(lag)) / var_plus;
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let total = (m * n) as f64;
    total / tau.max(1.0 / total.log10())
}

/// Inverse-CDF (type 1) sample quantile of already sorted values.
pub fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DemandRng;

    fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = DemandRng::seed_from(seed);
        let mut x = 0.0;
        (0..n)
            .map(|_| {
                x = phi * x + rng.standard_normal();
                x
            })
            .collect()
    }

    #[test]
    fn independent_chains_have_rhat_near_one() {
        let chains: Vec<Vec<f64>> = (0..4).map(|s| ar1(0.0, 2000, s)).collect();
        let r = split_rhat(&chains);
        assert!((r - 1.0).abs() < 0.01, "{r}");
        let ess = effective_sample_size(&chains);
        assert!(ess > 6000.0, "{ess}");
    }

    #[test]
    fn ar1_ess_matches_theory() {
        // ESS fraction for AR(1) is (1 - φ) / (1 + φ).
        let chains: Vec<Vec<f64>> = (0..4).map(|s| ar1(0.8, 20_000, 10 + s)).collect();
        let ess = effective_sample_size(&chains);
        let expected = 80_000.0 * 0.2 / 1.8;
        assert!((ess / expected - 1.0).abs() < 0.15, "{ess} vs {expected}");
    }

    #[test]
    fn shifted_chains_flag_rhat() {
        let mut chains: Vec<Vec<f64>> = (0..2).map(|s| ar1(0.0, 500, s)).collect();
        chains[1].iter_mut().for_each(|v| *v += 5.0);
        assert!(split_rhat(&chains) > RHAT_WARNING);
    }

    #[test]
    fn type_one_quantiles_do_not_cross() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(sorted_quantile(&v, 0.05), 1.0);
        assert_eq!(sorted_quantile(&v, 0.5), 2.0);
        assert_eq!(sorted_quantile(&v, 0.95), 4.0);
    }
}
