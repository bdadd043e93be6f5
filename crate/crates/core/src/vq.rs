//! Discrete codebook quantization: nearest-neighbor assignment with
//! straight-through gradients, EMA codebook updates, optional L2-normalized
//! embeddings, dead-code reseeding, and the quantization loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FVQ1";

#[derive(Clone, Copy, Debug)]
pub struct CodebookConfig {
    /// Number of entries.
    pub size: usize,
    /// Embedding length n_z.
    pub dim: usize,
    /// EMA decay.
    pub gamma: f64,
    /// Laplace guard in the EMA normalization.
    pub eps: f64,
    /// Normalize entries (and queries) to unit L2 norm.
    pub l2_normalize: bool,
    /// Reseed an entry after this many consecutive unused steps; None
    /// disables dead-code handling.
    pub dead_code_steps: Option<u32>,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            size: 64,
            dim: 8,
            gamma: 0.99,
            eps: 1e-5,
            l2_normalize: true,
            dead_code_steps: Some(256),
        }
    }
}

/// The set of discrete embeddings with EMA accumulators.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub cfg: CodebookConfig,
    entries: Tensor,
    ema_cluster_size: Vec<f64>,
    ema_embed_sum: Tensor,
    usage_counts: Vec<u64>,
    dead_streak: Vec<u32>,
}

impl Codebook {
    pub fn new(cfg: CodebookConfig, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (cfg.dim as f64).sqrt();
        let mut entries =
            Tensor::from_fn(&[cfg.size, cfg.dim], |_| rng.gen_range(-scale..scale));
        if cfg.l2_normalize {
            normalize_rows(&mut entries);
        }
        let ema_embed_sum = entries.clone();
        Codebook {
            cfg,
            entries,
            ema_cluster_size: vec![1.0; cfg.size],
            ema_embed_sum,
            usage_counts: vec![0; cfg.size],
            dead_streak: vec![0; cfg.size],
        }
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    /// Entries before L2 renormalization: ema_embed_sum / (ema_cluster_size + eps).
    pub fn raw_means(&self) -> Tensor {
        let k = self.cfg.size;
        let d = self.cfg.dim;
        Tensor::from_fn(&[k, d], |i| {
            self.ema_embed_sum.data()[i] / (self.ema_cluster_size[i / d] + self.cfg.eps)
        })
    }

    /// Nearest entry per row of `z[R, n_z]` by Euclidean distance (on
    /// L2-normalized vectors when enabled). Ties break to the lowest
    /// index. Returns the selected entries and their indices.
    pub fn quantize_rows(&self, z: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        if self.cfg.size == 0 {
            return Err(Error::Contract("empty codebook".into()));
        }
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.cfg.dim {
            return Err(Error::Shape(format!(
                "quantize rows {:?} vs dim {}",
                shape, self.cfg.dim
            )));
        }
        let rows = shape[0];
        let d = self.cfg.dim;
        let k = self.cfg.size;
        let ev = self.entries.data();
        let mut out = Tensor::zeros(&[rows, d]);
        let mut indices = Vec::with_capacity(rows);
        let mut q = vec![0.0; d];
        for r in 0..rows {
            let zr = &z.data()[r * d..(r + 1) * d];
            let query: &[f64] = if self.cfg.l2_normalize {
                q.copy_from_slice(zr);
                normalize_slice(&mut q);
                &q
            } else {
                zr
            };
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for e in 0..k {
                let er = &ev[e * d..(e + 1) * d];
                let mut dist = 0.0;
                for j in 0..d {
                    let t = query[j] - er[j];
                    dist += t * t;
                }
                if dist < best_d {
                    best_d = dist;
                    best = e;
                }
            }
            indices.push(best);
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&ev[best * d..(best + 1) * d]);
        }
        Ok((out, indices))
    }

    /// [B,h,w,n_z] convenience wrapper around [`Codebook::quantize_rows`].
    pub fn quantize(&self, z: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let shape = z.shape().to_vec();
        if shape.len() != 4 || shape[3] != self.cfg.dim {
            return Err(Error::Shape(format!(
                "quantize expects [B,h,w,{}], got {shape:?}",
                self.cfg.dim
            )));
        }
        let rows = shape[0] * shape[1] * shape[2];
        let flat = z.clone().reshaped(vec![rows, self.cfg.dim])?;
        let (q, idx) = self.quantize_rows(&flat)?;
        Ok((q.reshaped(shape)?, idx))
    }

    /// EMA codebook update from the batch that produced `indices`.
    /// With L2 normalization enabled, the accumulated vectors are the
    /// normalized queries (the distance space), and entries are
    /// renormalized after the mean.
    pub fn ema_update(&mut self, z: &Tensor, indices: &[usize]) -> Result<()> {
        let d = self.cfg.dim;
        let k = self.cfg.size;
        if z.numel() != indices.len() * d {
            return Err(Error::Shape(format!(
                "ema_update: {} rows of dim {d} vs {} indices",
                z.numel() / d,
                indices.len()
            )));
        }
        let gamma = self.cfg.gamma;
        let mut counts = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        let mut row = vec![0.0; d];
        for (r, &idx) in indices.iter().enumerate() {
            counts[idx] += 1.0;
            row.copy_from_slice(&z.data()[r * d..(r + 1) * d]);
            if self.cfg.l2_normalize {
                normalize_slice(&mut row);
            }
            for j in 0..d {
                sums[idx * d + j] += row[j];
            }
        }
        for e in 0..k {
            self.ema_cluster_size[e] = gamma * self.ema_cluster_size[e] + (1.0 - gamma) * counts[e];
            for j in 0..d {
                let s = &mut self.ema_embed_sum.data_mut()[e * d + j];
                *s = gamma * *s + (1.0 - gamma) * sums[e * d + j];
            }
            let denom = self.ema_cluster_size[e] + self.cfg.eps;
            for j in 0..d {
                self.entries.data_mut()[e * d + j] = self.ema_embed_sum.data()[e * d + j] / denom;
            }
            if counts[e] > 0.0 {
                self.usage_counts[e] += counts[e] as u64;
                self.dead_streak[e] = 0;
            } else {
                self.dead_streak[e] = self.dead_streak[e].saturating_add(1);
            }
        }
        if self.cfg.l2_normalize {
            normalize_rows(&mut self.entries);
        }
        Ok(())
    }

    /// Reseed entries unused for `dead_code_steps` consecutive updates
    /// from random rows of the current batch. Returns how many moved.
    pub fn reseed_dead(&mut self, z: &Tensor, rng: &mut ChaCha8Rng) -> usize {
        let Some(limit) = self.cfg.dead_code_steps else { return 0 };
        let d = self.cfg.dim;
        let rows = z.numel() / d;
        if rows == 0 {
            return 0;
        }
        let mut reseeded = 0;
        for e in 0..self.cfg.size {
            if self.dead_streak[e] < limit {
                continue;
            }
            let r = rng.gen_range(0..rows);
            let mut row = z.data()[r * d..(r + 1) * d].to_vec();
            if self.cfg.l2_normalize {
                normalize_slice(&mut row);
            }
            self.entries.data_mut()[e * d..(e + 1) * d].copy_from_slice(&row);
            self.ema_embed_sum.data_mut()[e * d..(e + 1) * d].copy_from_slice(&row);
            self.ema_cluster_size[e] = 1.0;
            self.dead_streak[e] = 0;
            reseeded += 1;
        }
        reseeded
    }

    pub fn dead_streaks(&self) -> &[u32] {
        &self.dead_streak
    }

    pub fn set_dead_streaks(&mut self, streaks: &[u32]) -> Result<()> {
        if streaks.len() != self.cfg.size {
            return Err(Error::Contract("dead streak length mismatch".into()));
        }
        self.dead_streak.copy_from_slice(streaks);
        Ok(())
    }

    /// Round all persistent state through f32 (training-path precision).
    pub fn round_to_f32(&mut self) {
        self.entries.round_to_f32();
        self.ema_embed_sum.round_to_f32();
        for v in &mut self.ema_cluster_size {
            *v = *v as f32 as f64;
        }
    }

    // ── Serialization (flat binary blob) ────────────────────────────

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.cfg.size as u32).to_le_bytes());
        out.extend_from_slice(&(self.cfg.dim as u32).to_le_bytes());
        let flags: u32 = if self.cfg.l2_normalize { 1 } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for &v in self.entries.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in &self.ema_cluster_size {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in self.ema_embed_sum.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Parse a blob; hyperparameters not stored in the blob (gamma, eps,
    /// dead-code policy) come from `cfg`, which must agree on size/dim
    /// unless size/dim are zero in cfg (then the blob's header wins).
    pub fn from_bytes(bytes: &[u8], mut cfg: CodebookConfig) -> Result<(Self, usize)> {
        let need = 4 + 4 + 4 + 4;
        if bytes.len() < need {
            return Err(Error::Format("codebook blob truncated".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad codebook magic".into()));
        }
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let flags = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        if cfg.size != 0 && cfg.size != k {
            return Err(Error::Format(format!("codebook size {k} != expected {}", cfg.size)));
        }
        if cfg.dim != 0 && cfg.dim != d {
            return Err(Error::Format(format!("codebook dim {d} != expected {}", cfg.dim)));
        }
        cfg.size = k;
        cfg.dim = d;
        cfg.l2_normalize = flags & 1 == 1;
        let floats = k * d + k + k * d;
        let total = 16 + 4 * floats;
        if bytes.len() < total {
            return Err(Error::Format("codebook blob truncated".into()));
        }
        let mut vals = Vec::with_capacity(floats);
        for i in 0..floats {
            let off = 16 + 4 * i;
            vals.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
        }
        let entries = Tensor::new(vec![k, d], vals[0..k * d].to_vec())?;
        let ema_cluster_size = vals[k * d..k * d + k].to_vec();
        let ema_embed_sum = Tensor::new(vec![k, d], vals[k * d + k..].to_vec())?;
        if !entries.is_finite() || !ema_embed_sum.is_finite() {
            return Err(Error::Format("codebook blob holds non-finite values".into()));
        }
        Ok((
            Codebook {
                cfg,
                entries,
                ema_cluster_size,
                ema_embed_sum,
                usage_counts: vec![0; k],
                dead_streak: vec![0; k],
            },
            total,
        ))
    }
}

fn normalize_rows(t: &mut Tensor) {
    let d = *t.shape().last().unwrap();
    let rows = t.numel() / d;
    for r in 0..rows {
        normalize_slice(&mut t.data_mut()[r * d..(r + 1) * d]);
    }
}

fn normalize_slice(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
}

// ── Tape-side pieces ────────────────────────────────────────────────

/// Straight-through estimator: forward value is the quantized rows,
/// backward passes the gradient to `z` unchanged (and nothing to the
/// codebook, which is updated by EMA).
pub fn straight_through(tape: &mut Tape, z: Var, quantized: &Tensor) -> Result<Var> {
    if tape.shape(z) != quantized.shape() {
        return Err(Error::Shape(format!(
            "straight_through {:?} vs {:?}",
            tape.shape(z),
            quantized.shape()
        )));
    }
    let q = tape.constant(quantized.clone())?;
    let delta = tape.sub(q, z)?;
    let blocked = tape.detach(delta);
    tape.add(z, blocked)
}

/// Commitment term of the quantization loss:
/// `beta_commit * mean((z − sg(ẑ_q))²)`. Gradient reaches only `z`.
pub fn quantization_loss(tape: &mut Tape, z: Var, zq: Var, beta_commit: f64) -> Result<Var> {
    let stopped = tape.detach(zq);
    let diff = tape.sub(z, stopped)?;
    let sq = tape.mul(diff, diff)?;
    let m = tape.mean(sq);
    Ok(tape.scale(m, beta_commit))
}

/// Codebook-alignment term for the gradient-codebook ablation:
/// `mean((sg(z) − entries[indices])²)`, gradient reaching the entries leaf.
pub fn codebook_alignment_loss(
    tape: &mut Tape,
    z: Var,
    entries: Var,
    indices: &[usize],
) -> Result<Var> {
    let gathered = tape.embed(entries, indices)?;
    let rows = indices.len();
    let d = tape.shape(entries)[1];
    let zr = tape.reshape(z, &[rows, d])?;
    let stopped = tape.detach(zr);
    let diff = tape.sub(stopped, gathered)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Exponential of the entropy of the empirical index distribution,
/// in [1, |codebook|].
pub fn perplexity(indices: &[usize], codebook_size: usize) -> f64 {
    if indices.is_empty() || codebook_size == 0 {
        return 1.0;
    }
    let mut counts = vec![0usize; codebook_size];
    for &i in indices {
        counts[i] += 1;
    }
    let n = indices.len() as f64;
    let mut entropy = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / n;
            entropy -= p * p.ln();
        }
    }
    entropy.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn cfg(size: usize, dim: usize) -> CodebookConfig {
        CodebookConfig { size, dim, l2_normalize: false, dead_code_steps: None, ..Default::default() }
    }

    fn with_entries(entries: Tensor, c: CodebookConfig) -> Codebook {
        let mut cb = Codebook::new(c, &mut stream(0, "test", 0));
        cb.entries = entries.clone();
        cb.ema_embed_sum = entries;
        cb.ema_cluster_size = vec![1.0; c.size];
        cb
    }

    #[test]
    fn exact_match_returns_that_entry() {
        let entries = Tensor::from_fn(&[10, 3], |i| i as f64 * 0.17 - 0.5);
        let cb = with_entries(entries.clone(), cfg(10, 3));
        let z = Tensor::new(vec![1, 3], entries.data()[21..24].to_vec()).unwrap();
        let (q, idx) = cb.quantize_rows(&z).unwrap();
        assert_eq!(idx, vec![7]);
        assert_eq!(q.data(), &entries.data()[21..24]);
    }

    #[test]
    fn two_entry_nearest_by_inspection() {
        let entries = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let cb = with_entries(entries, cfg(2, 2));
        let z = Tensor::new(vec![1, 2], vec![0.9, 0.9]).unwrap();
        let (_, idx) = cb.quantize_rows(&z).unwrap();
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let entries = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        let cb = with_entries(entries, cfg(2, 1));
        let z = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let (_, idx) = cb.quantize_rows(&z).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn empty_codebook_is_error() {
        let entries = Tensor::zeros(&[0, 2]);
        let cb = with_entries(entries, cfg(0, 2));
        let z = Tensor::zeros(&[1, 2]);
        assert!(cb.quantize_rows(&z).is_err());
    }

    #[test]
    fn gamma_zero_entry_equals_batch_mean() {
        let entries = Tensor::from_fn(&[2, 2], |i| i as f64);
        let mut c = cfg(2, 2);
        c.gamma = 0.0;
        let mut cb = with_entries(entries, c);
        let z = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 2.0, 0.0]).unwrap();
        cb.ema_update(&z, &[0, 0, 0]).unwrap();
        // eps guard shifts the mean by eps/(count+eps); compare against the guarded value.
        let denom = 3.0 + cb.cfg.eps;
        let want = [6.0 / denom, 6.0 / denom];
        for (a, b) in cb.entries().data()[0..2].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn unassigned_entry_decays_without_changing_direction() {
        let entries = Tensor::new(vec![2, 2], vec![3.0, 4.0, -1.0, 2.0]).unwrap();
        let mut cb = with_entries(entries, cfg(2, 2));
        let before = cb.entries().data()[0..2].to_vec();
        let z = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        cb.ema_update(&z, &[1]).unwrap();
        let after = &cb.entries().data()[0..2];
        // Entry 0 saw nothing: both accumulators decay by gamma, so the
        // quotient moves only through the eps guard; direction unchanged.
        let cross = before[0] * after[1] - before[1] * after[0];
        assert!(cross.abs() < 1e-9, "direction changed: {cross}");
        assert!(cb.dead_streaks()[0] == 1 && cb.dead_streaks()[1] == 0);
    }

    #[test]
    fn fixed_assignment_converges_to_cluster_mean() {
        let entries = Tensor::from_fn(&[4, 2], |i| (i as f64) * 0.3 - 0.5);
        let mut c = cfg(4, 2);
        c.gamma = 0.99;
        let mut cb = with_entries(entries.clone(), c);
        let z = Tensor::new(vec![2, 2], vec![0.4, -0.2, 0.8, 0.6]).unwrap();

        // Literal recurrence oracle for entry 2's accumulators.
        let mut size_o = 1.0f64;
        let mut sum_o = [entries.data()[4], entries.data()[5]];
        for step in 0..1000 {
            cb.ema_update(&z, &[2, 2]).unwrap();
            size_o = 0.99 * size_o + 0.01 * 2.0;
            sum_o[0] = 0.99 * sum_o[0] + 0.01 * (0.4 + 0.8);
            sum_o[1] = 0.99 * sum_o[1] + 0.01 * (-0.2 + 0.6);
            if step == 499 {
                let raw = cb.raw_means();
                for (g, s) in raw.data()[4..6].iter().zip(&sum_o) {
                    let want = s / (size_o + cb.cfg.eps);
                    assert!((g - want).abs() < 1e-12, "recurrence mismatch {g} vs {want}");
                }
            }
        }
        // Fixed point: within 1e-3 of the assigned-vector mean in ≤1000 steps.
        let mean = [0.6, 0.2];
        let raw = cb.raw_means();
        let got = &raw.data()[4..6];
        for (g, w) in got.iter().zip(&mean) {
            assert!((g - w).abs() < 1e-3, "{g} vs {w}");
        }
    }

    #[test]
    fn l2_mode_keeps_entries_unit_norm_and_indices_scale_invariant() {
        let mut c = cfg(8, 3);
        c.l2_normalize = true;
        let mut rng = stream(3, "test", 0);
        let mut cb = Codebook::new(c, &mut rng);
        let z = Tensor::from_fn(&[6, 3], |i| (i as f64 * 0.731).sin());
        let (_, idx1) = cb.quantize_rows(&z).unwrap();
        let z_scaled = z.map(|v| v * 37.5);
        let (_, idx2) = cb.quantize_rows(&z_scaled).unwrap();
        assert_eq!(idx1, idx2);
        cb.ema_update(&z, &idx1).unwrap();
        for r in 0..8 {
            let norm: f64 =
                cb.entries().data()[r * 3..(r + 1) * 3].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "row {r} norm {norm}");
        }
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(&[3, 3, 3, 3], 16), 1.0);
        let uniform: Vec<usize> = (0..16).collect();
        assert!((perplexity(&uniform, 16) - 16.0).abs() < 1e-12);
        assert!((perplexity(&[0, 0, 1, 1], 4) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn blob_roundtrip() {
        let mut rng = stream(9, "test", 0);
        let mut cb = Codebook::new(CodebookConfig { size: 5, dim: 3, ..Default::default() }, &mut rng);
        cb.round_to_f32();
        let bytes = cb.to_bytes();
        let (back, used) = Codebook::from_bytes(&bytes, cb.cfg).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back.entries().data(), cb.entries().data());
        assert_eq!(back.ema_cluster_size, cb.ema_cluster_size);
        assert!(Codebook::from_bytes(&bytes[..10], cb.cfg).is_err());
    }
}
