//! Mask similarity and structure metrics: intersection-over-union of kept
//! sets, overlap percentage, analytic random baselines, pairwise matrices,
//! layerwise sparsity profiles, and mask trajectories.

use crate::error::Result;
use crate::pruning::Mask;

/// IOU of the kept-weight index sets. Both-empty keeps by convention 1.0.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.same_layout(b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for ((_, xa), (_, xb)) in a.entries().iter().zip(b.entries()) {
        for (&ka, &kb) in xa.iter().zip(xb) {
            inter += (ka && kb) as usize;
            union += (ka || kb) as usize;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Kept-intersection size over the total prunable parameter count.
pub fn overlap_pct(a: &Mask, b: &Mask) -> Result<f64> {
    a.same_layout(b)?;
    let mut inter = 0usize;
    for ((_, xa), (_, xb)) in a.entries().iter().zip(b.entries()) {
        inter += xa.iter().zip(xb).filter(|(&ka, &kb)| ka && kb).count();
    }
    let d = a.len();
    if d == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / d as f64)
    }
}

/// Expected IOU of two independent uniform masks at sparsity `s` in the
/// large-d limit: k/(2-k) with keep rate k = 1-s.
pub fn random_iou_baseline(s: f64) -> f64 {
    if s >= 1.0 {
        return 1.0; // both keep nothing
    }
    let k = 1.0 - s;
    k / (2.0 - k)
}

/// Labeled symmetric matrix of pairwise IOUs (or overlaps).
#[derive(Debug, Clone)]
pub struct IOUMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub sparsity: f64,
}

impl IOUMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(l);
            for v in &self.values[i] {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

fn pairwise(
    masks: &[(String, Mask)],
    f: impl Fn(&Mask, &Mask) -> Result<f64>,
) -> Result<IOUMatrix> {
    let n = masks.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = f(&masks[i].1, &masks[j].1)?;
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    let sparsity = masks.first().map(|(_, m)| m.sparsity()).unwrap_or(0.0);
    Ok(IOUMatrix { labels: masks.iter().map(|(l, _)| l.clone()).collect(), values, sparsity })
}

pub fn iou_matrix(masks: &[(String, Mask)]) -> Result<IOUMatrix> {
    pairwise(masks, iou)
}

pub fn overlap_matrix(masks: &[(String, Mask)]) -> Result<IOUMatrix> {
    pairwise(masks, overlap_pct)
}

/// Per-layer sparsity, grouped by encoder block (affine weights and biases
/// aggregated; non-prunable params are excluded by construction since the
/// mask never covers them).
#[derive(Debug, Clone)]
pub struct LayerSparsityProfile {
    pub layers: Vec<(String, f64, usize)>,
    pub global_sparsity: f64,
}

impl LayerSparsityProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,sparsity,elements\n");
        for (l, s, n) in &self.layers {
            out.push_str(&format!("{l},{s:.6},{n}\n"));
        }
        out.push_str(&format!("GLOBAL,{:.6},{}\n", self.global_sparsity, self
            .layers
            .iter()
            .map(|(_, _, n)| n)
            .sum::<usize>()));
        out
    }
}

pub fn layerwise_sparsity(mask: &Mask) -> LayerSparsityProfile {
    // group label = param name up to the first '.', e.g. "block0"
    let mut layers: Vec<(String, usize, usize)> = Vec::new(); // (label, zeros, total)
    for (name, bits) in mask.entries() {
        let label = name.split('.').next().unwrap_or(name).to_string();
        let zeros = bits.iter().filter(|&&b| !b).count();
        match layers.iter_mut().find(|(l, _, _)| *l == label) {
            Some(entry) => {
                entry.1 += zeros;
                entry.2 += bits.len();
            }
            None => layers.push((label, zeros, bits.len())),
        }
    }
    let total: usize = layers.iter().map(|(_, _, n)| n).sum();
    let zeros: usize = layers.iter().map(|(_, z, _)| z).sum();
    LayerSparsityProfile {
        layers: layers
            .into_iter()
            .map(|(l, z, n)| (l, z as f64 / n as f64, n))
            .collect(),
        global_sparsity: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
    }
}

/// IOU of each snapshot against a reference mask, in snapshot order.
pub fn mask_trajectory(snapshots: &[Mask], reference: &Mask) -> Result<Vec<f64>> {
    snapshots.iter().map(|m| iou(m, reference)).collect()
}
