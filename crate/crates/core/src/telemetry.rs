//! Expert-activation and assign-diversity analytics.
//!
//! MoE layers log which experts every (sub-)token was routed to; this module
//! turns those logs into per-layer activation ratios, activation percentages
//! against a threshold, per-token expert diversity, and CSV / ASCII-PGM
//! exports of the activation heatmap.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-layer record of routing events.
///
/// One event per routed row: the originating token, the head the sub-token
/// came from (0 when routing is token-level), and the k selected experts.
#[derive(Debug, Clone)]
pub struct AssignmentLog {
    pub layer: usize,
    /// `Some(h)` when rows are sub-tokens from a multi-head split; `None`
    /// for token-level routing.
    pub heads: Option<usize>,
    pub num_experts: usize,
    pub k: usize,
    /// Token count (not sub-token count).
    pub num_tokens: usize,
    pub token_of_event: Vec<u32>,
    pub head_of_event: Vec<u32>,
    /// k expert ids per event, flattened.
    pub experts_of_event: Vec<u32>,
}

impl AssignmentLog {
    pub fn events(&self) -> usize {
        self.token_of_event.len()
    }
}

/// How activation ratios are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Divide selection counts by routing events (l*h for multi-head layers),
    /// making layers with different head counts comparable. Rows sum to k.
    PerEvent,
    /// Divide by token count l; rows sum to k*h.
    PerToken,
}

/// Layers x experts matrix of expert selection ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    /// Layer ids, ascending, one per row of `ratios`.
    pub layers: Vec<usize>,
    pub ratios: Vec<Vec<f64>>,
    pub k: usize,
    pub normalization: Normalization,
}

/// Selection frequency of each expert per layer, merged across logs.
///
/// Logs for the same layer (e.g. from successive eval batches) accumulate;
/// the result is invariant to the order of logs and events.
pub fn activation_ratios(logs: &[AssignmentLog], normalization: Normalization) -> Result<ActivationMatrix> {
    if logs.is_empty() {
        return Err(Error::Contract("activation_ratios: no logs".into()));
    }
    let k = logs[0].k;
    let mut per_layer: BTreeMap<usize, (Vec<u64>, u64, u64)> = BTreeMap::new();
    for log in logs {
        if log.k != k {
            return Err(Error::Contract(format!(
                "activation_ratios: mixed k ({k} vs {})",
                log.k
            )));
        }
        let entry = per_layer
            .entry(log.layer)
            .or_insert_with(|| (vec![0u64; log.num_experts], 0, 0));
        if entry.0.len() != log.num_experts {
            return Err(Error::Contract(format!(
                "activation_ratios: layer {} logged with {} and {} experts",
                log.layer,
                entry.0.len(),
                log.num_experts
            )));
        }
        for &p in &log.experts_of_event {
            entry.0[p as usize] += 1;
        }
        entry.1 += log.events() as u64;
        entry.2 += log.num_tokens as u64;
    }
    let mut layers = Vec::with_capacity(per_layer.len());
    let mut ratios = Vec::with_capacity(per_layer.len());
    for (layer, (counts, events, tokens)) in per_layer {
        let denom = match normalization {
            Normalization::PerEvent => events,
            Normalization::PerToken => tokens,
        };
        if denom == 0 {
            return Err(Error::Contract(format!(
                "activation_ratios: layer {layer} has no events"
            )));
        }
        layers.push(layer);
        ratios.push(counts.iter().map(|&c| c as f64 / denom as f64).collect());
    }
    Ok(ActivationMatrix {
        layers,
        ratios,
        k,
        normalization,
    })
}

/// Fraction of experts whose ratio exceeds `threshold`, per layer and overall.
pub fn activation_percentage(matrix: &ActivationMatrix, threshold: f64) -> Result<(Vec<f64>, f64)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Contract(format!(
            "activation_percentage: threshold must be in (0, 1), got {threshold}"
        )));
    }
    let mut per_layer = Vec::with_capacity(matrix.ratios.len());
    let mut active: usize = 0;
    let mut total: usize = 0;
    for row in &matrix.ratios {
        let layer_active = row.iter().filter(|&&r| r > threshold).count();
        per_layer.push(layer_active as f64 / row.len() as f64);
        active += layer_active;
        total += row.len();
    }
    Ok((per_layer, active as f64 / total as f64))
}

/// Default activation threshold: a quarter of the uniform single-selection
/// share, 1/(4N). Always reported alongside results.
pub fn default_threshold(num_experts: usize) -> f64 {
    1.0 / (4.0 * num_experts as f64)
}

/// For each token: the number of distinct experts its sub-tokens were routed
/// to, averaged across layers. Requires multi-head logs (head indices).
///
/// Values lie in [1, min(N, h*k)].
pub fn assign_diversity(logs: &[AssignmentLog]) -> Result<Vec<f64>> {
    if logs.is_empty() {
        return Err(Error::Contract("assign_diversity: no logs".into()));
    }
    let num_tokens = logs[0].num_tokens;
    let mut sums = vec![0.0; num_tokens];
    let mut layer_count = vec![0u32; num_tokens];
    let mut by_layer: BTreeMap<usize, Vec<&AssignmentLog>> = BTreeMap::new();
    for log in logs {
        if log.heads.is_none() {
            return Err(Error::Contract(
                "assign_diversity: log lacks head info (token-level routing)".into(),
            ));
        }
        if log.num_tokens != num_tokens {
            return Err(Error::Contract(format!(
                "assign_diversity: token counts differ across logs ({num_tokens} vs {})",
                log.num_tokens
            )));
        }
        by_layer.entry(log.layer).or_default().push(log);
    }
    for (_, layer_logs) in by_layer {
        let mut seen: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
        for log in layer_logs {
            for (e, &tok) in log.token_of_event.iter().enumerate() {
                let set = seen.entry(tok).or_default();
                for &p in &log.experts_of_event[e * log.k..(e + 1) * log.k] {
                    set.insert(p);
                }
            }
        }
        for (tok, set) in seen {
            sums[tok as usize] += set.len() as f64;
            layer_count[tok as usize] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(&layer_count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

/// Write the activation matrix as CSV: header `layer,0,1,...,N-1`, one row
/// per layer. Values use the shortest round-trip float encoding, so reading
/// the file back reproduces the matrix exactly.
pub fn write_activation_csv(matrix: &ActivationMatrix, path: &Path) -> Result<()> {
    let n = matrix.ratios.first().map_or(0, Vec::len);
    let mut out = String::from("layer");
    for p in 0..n {
        write!(out, ",{p}").expect("string write");
    }
    out.push('\n');
    for (layer, row) in matrix.layers.iter().zip(&matrix.ratios) {
        write!(out, "{layer}").expect("string write");
        for v in row {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Read back a CSV produced by [`write_activation_csv`].
pub fn read_activation_csv(path: &Path) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty CSV", path.display())))?;
    if !header.starts_with("layer") {
        return Err(Error::Format(format!(
            "{}: unexpected CSV header {header:?}",
            path.display()
        )));
    }
    let mut layers = Vec::new();
    let mut ratios = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let layer = fields
            .next()
            .and_then(|f| f.parse::<usize>().ok())
            .ok_or_else(|| Error::Format(format!("{}: bad layer id in {line:?}", path.display())))?;
        let row = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("{}: bad ratio in {line:?}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        layers.push(layer);
        ratios.push(row);
    }
    Ok((layers, ratios))
}

/// Write the activation matrix as an ASCII PGM (P2) grayscale image, one
/// pixel per (layer, expert): value = round(255 * min(ratio / k, 1)).
pub fn write_activation_pgm(matrix: &ActivationMatrix, path: &Path) -> Result<()> {
    let height = matrix.ratios.len();
    let width = matrix.ratios.first().map_or(0, Vec::len);
    if height == 0 || width == 0 {
        return Err(Error::Contract("write_activation_pgm: empty matrix".into()));
    }
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in &matrix.ratios {
        let pixels: Vec<String> = row
            .iter()
            .map(|&r| {
                let v = (255.0 * (r / matrix.k as f64).min(1.0)).round() as u32;
                v.to_string()
            })
            .collect();
        out.push_str(&pixels.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
