//! Layer-wise relevance propagation (epsilon rule) over the classifier
//! head, relevance routing through the channel-max pool, and heatmap
//! export.
//!
//! Relevance is seeded at the output layer with the target class's raw
//! logit and redistributed to the classifier inputs proportionally to each
//! neuron's contribution `a_j w_jk`, with the denominator stabilized by
//! `epsilon * sign(sum_j a_j w_jk)`. Biases absorb no relevance. At
//! epsilon = 0 the total relevance at every layer equals the explained
//! logit. Routing past the pool is winner-take-all, matching the pool's
//! gradient; the propagation itself stops at the classifier inputs.

use std::path::{Path, PathBuf};

use crate::data::{write_gray_png, write_png};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{ClassifierTrace, NcaParams};
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceVector<F> {
    /// Per-feature relevance, one score per channel of the feature vector.
    pub scores: Vec<F>,
    pub target_class: usize,
    pub epsilon: F,
}

/// Redistributes one upper layer's relevance onto its inputs.
/// `w` is `upper x lower` row-major, `a` the lower-layer activations.
fn propagate_layer<F: Real>(a: &[F], w: &[F], upper_relevance: &[F], epsilon: F) -> Vec<F> {
    let lower = a.len();
    let mut out = vec![F::zero(); lower];
    for (k, &rk) in upper_relevance.iter().enumerate() {
        if rk == F::zero() {
            continue;
        }
        let row = &w[k * lower..(k + 1) * lower];
        let mut denom = F::zero();
        for j in 0..lower {
            denom = denom + a[j] * row[j];
        }
        let stabilized = denom + epsilon * signum_or_one(denom);
        if stabilized == F::zero() {
            continue;
        }
        for j in 0..lower {
            out[j] = out[j] + a[j] * row[j] / stabilized * rk;
        }
    }
    out
}

fn signum_or_one<F: Real>(v: F) -> F {
    if v < F::zero() {
        -F::one()
    } else {
        F::one()
    }
}

/// Epsilon-rule relevance of each extracted feature for `target_class`,
/// propagated through both classifier layers using the activations stored
/// during the explained forward pass.
pub fn lrp_epsilon<F: Real>(
    trace: &ClassifierTrace<F>,
    params: &NcaParams<F>,
    target_class: usize,
    epsilon: F,
) -> Result<RelevanceVector<F>> {
    if trace.hidden.is_empty() || trace.logits.is_empty() {
        return Err(Error::MissingActivations);
    }
    if trace.hidden.len() != params.b3.len() || trace.features.len() * params.b3.len() != params.w3.len()
    {
        return Err(Error::MissingActivations);
    }
    if target_class >= trace.logits.len() {
        return Err(Error::LabelOutOfRange {
            label: target_class,
            num_classes: trace.logits.len(),
        });
    }
    let mut output_relevance = vec![F::zero(); trace.logits.len()];
    output_relevance[target_class] = trace.logits[target_class];
    // ReLU needs no extra step: the stored hidden activations are post-ReLU.
    let hidden_relevance = propagate_layer(&trace.hidden, &params.w4, &output_relevance, epsilon);
    let feature_relevance =
        propagate_layer(&trace.features, &params.w3, &hidden_relevance, epsilon);
    Ok(RelevanceVector { scores: feature_relevance, target_class, epsilon })
}

/// Relative stabilizer: `1e-6 * mean |denominator|` over the layer-2 rows.
pub fn default_epsilon<F: Real>(trace: &ClassifierTrace<F>, params: &NcaParams<F>) -> F {
    let h = trace.hidden.len();
    let mut acc = F::zero();
    let mut rows = 0usize;
    for k in 0..trace.logits.len() {
        let mut denom = F::zero();
        for j in 0..h {
            denom = denom + trace.hidden[j] * params.w4[k * h + j];
        }
        acc = acc + denom.abs();
        rows += 1;
    }
    F::from_f64_c(1e-6) * acc / F::from_usize_c(rows.max(1))
}

/// One channel's share of the explanation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceEntry {
    pub channel: usize,
    /// The cell that won the channel max during the explained rollout;
    /// the whole channel relevance is attributed to it.
    pub winner: (usize, usize),
    pub relevance: f32,
    /// The channel's activation plane from the final state, row-major.
    pub activation: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub height: usize,
    pub width: usize,
    /// Sorted by descending relevance, stable by channel index on ties.
    pub entries: Vec<RelevanceEntry>,
}

/// Assigns each feature's relevance entirely to its channel's winning cell.
pub fn route_to_cells(
    relevance: &RelevanceVector<f32>,
    final_state: &Grid<f32>,
    argmax_pos: &[(usize, usize)],
) -> RelevanceMap {
    let mut entries: Vec<RelevanceEntry> = relevance
        .scores
        .iter()
        .enumerate()
        .map(|(channel, &score)| RelevanceEntry {
            channel,
            winner: argmax_pos[channel],
            relevance: score,
            activation: final_state.channel_plane(channel),
        })
        .collect();
    // stable sort keeps channel order on ties
    entries.sort_by(|a, b| b.relevance.partial_cmp(&a.relevance).unwrap());
    RelevanceMap { height: final_state.height(), width: final_state.width(), entries }
}

/// Min-max normalization; constant planes render as zeros.
fn normalize_plane(plane: &[f32]) -> Vec<f32> {
    let min = plane.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if max - min <= 0.0 {
        return vec![0.0; plane.len()];
    }
    plane.iter().map(|&v| (v - min) / (max - min)).collect()
}

/// Writes the top-k channel activation heatmaps as grayscale PNGs, one
/// composite row image, and a `relevance.tsv` sidecar with columns
/// channel, relevance, row, col (descending relevance).
pub fn export_heatmaps(map: &RelevanceMap, top_k: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if top_k > map.entries.len() {
        return Err(Error::InvalidConfig(format!(
            "top_k {} exceeds channel count {}",
            top_k,
            map.entries.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::OutputWrite {
        path: out_dir.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut written = Vec::new();
    let mut composite = Grid::zeros(map.height, map.width * top_k.max(1), 3);
    let mut sidecar = String::from("channel\trelevance\trow\tcol\n");
    for (rank, entry) in map.entries.iter().take(top_k).enumerate() {
        let plane = normalize_plane(&entry.activation);
        let path = out_dir.join(format!("channel_{:03}.png", entry.channel));
        write_gray_png(&path, &plane, map.height, map.width)?;
        written.push(path);
        for i in 0..map.height {
            for j in 0..map.width {
                let v = plane[i * map.width + j];
                let cell = composite.cell_mut(i, rank * map.width + j);
                cell.fill(v);
            }
        }
        sidecar.push_str(&format!(
            "{}\t{:.6}\t{}\t{}\n",
            entry.channel, entry.relevance, entry.winner.0, entry.winner.1
        ));
    }
    let composite_path = out_dir.join("composite.png");
    write_png(&composite_path, &composite)?;
    written.push(composite_path);
    let sidecar_path = out_dir.join("relevance.tsv");
    std::fs::write(&sidecar_path, sidecar).map_err(|e| Error::OutputWrite {
        path: sidecar_path.clone(),
        detail: e.to_string(),
    })?;
    written.push(sidecar_path);
    Ok(written)
}
