//! Codebooks, nearest-entry quantization and residual stacking.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// One quantization layer: `k` entries of width `dim` plus EMA state.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    entries: Vec<f32>,
    ema_counts: Vec<f32>,
    ema_sums: Vec<f32>,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, entries: Vec<f32>) -> Result<Self> {
        if k < 2 || dim == 0 {
            return Err(Error::invalid(format!("codebook needs K >= 2 and width > 0, got K={k}")));
        }
        if entries.len() != k * dim {
            return Err(Error::Shape {
                what: "codebook entries".into(),
                expected: k * dim,
                found: entries.len(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook entries must be finite"));
        }
        Ok(Codebook {
            k,
            dim,
            ema_sums: entries.clone(),
            ema_counts: vec![1.0; k],
            entries,
        })
    }

    /// Restores a full state, e.g. from a checkpoint.
    pub fn with_state(k: usize, dim: usize, entries: Vec<f32>, counts: Vec<f32>, sums: Vec<f32>) -> Result<Self> {
        let mut cb = Codebook::new(k, dim, entries)?;
        if counts.len() != k || sums.len() != k * dim {
            return Err(Error::invalid("codebook EMA state does not match its shape"));
        }
        if counts.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::invalid("codebook EMA counts must be non-negative"));
        }
        cb.ema_counts = counts;
        cb.ema_sums = sums;
        Ok(cb)
    }

    /// Initializes entries from randomly chosen sample rows.
    pub fn from_samples(k: usize, dim: usize, samples: &[f32], rng: &mut Rng) -> Result<Self> {
        let rows = samples.len() / dim;
        if rows == 0 || samples.len() % dim != 0 {
            return Err(Error::invalid("codebook init needs at least one whole sample row"));
        }
        let mut entries = Vec::with_capacity(k * dim);
        for _ in 0..k {
            let r = rng.random_range(0..rows);
            entries.extend_from_slice(&samples[r * dim..(r + 1) * dim]);
        }
        Codebook::new(k, dim, entries)
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &[f32] {
        &self.entries[index * self.dim..(index + 1) * self.dim]
    }

    pub fn ema_counts(&self) -> &[f32] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f32] {
        &self.ema_sums
    }

    /// Index of the Euclidean-nearest entry; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.k {
            let d: f64 = self
                .entry(k)
                .iter()
                .zip(v)
                .map(|(&c, &x)| {
                    let diff = x as f64 - c as f64;
                    diff * diff
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Moving-average update of counts and sums from one batch of assignments,
    /// then entries = sums / counts for codes with positive mass.
    pub fn ema_update(&mut self, inputs: &[f32], assignments: &[usize], decay: f32) -> Result<()> {
        if inputs.len() != assignments.len() * self.dim {
            return Err(Error::Shape {
                what: "EMA update inputs".into(),
                expected: assignments.len() * self.dim,
                found: inputs.len(),
            });
        }
        let mut counts = vec![0.0f32; self.k];
        let mut sums = vec![0.0f32; self.k * self.dim];
        for (row, &a) in assignments.iter().enumerate() {
            counts[a] += 1.0;
            let src = &inputs[row * self.dim..(row + 1) * self.dim];
            for (s, &x) in sums[a * self.dim..(a + 1) * self.dim].iter_mut().zip(src) {
                *s += x;
            }
        }
        let keep = 1.0 - decay;
        for k in 0..self.k {
            self.ema_counts[k] = decay * self.ema_counts[k] + keep * counts[k];
        }
        for (s, &b) in self.ema_sums.iter_mut().zip(&sums) {
            *s = decay * *s + keep * b;
        }
        for k in 0..self.k {
            let c = self.ema_counts[k];
            if c > 1e-12 {
                let o = k * self.dim;
                for d in 0..self.dim {
                    self.entries[o + d] = self.ema_sums[o + d] / c;
                }
            }
        }
        Ok(())
    }

    /// Re-seeds every entry whose EMA count is below `threshold` with a random
    /// candidate row. Returns the replaced indices.
    pub fn reset_dead(&mut self, threshold: f32, candidates: &[f32], rng: &mut Rng) -> Result<Vec<usize>> {
        let rows = candidates.len() / self.dim;
        if rows == 0 || candidates.len() % self.dim != 0 {
            return Err(Error::invalid("codebook reset needs whole candidate rows"));
        }
        let mut replaced = Vec::new();
        for k in 0..self.k {
            if self.ema_counts[k] < threshold {
                let r = rng.random_range(0..rows);
                let src = &candidates[r * self.dim..(r + 1) * self.dim];
                let o = k * self.dim;
                self.entries[o..o + self.dim].copy_from_slice(src);
                self.ema_sums[o..o + self.dim].copy_from_slice(src);
                self.ema_counts[k] = 1.0;
                replaced.push(k);
            }
        }
        Ok(replaced)
    }
}

/// Token indices, one sequence per quantization layer (base first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionTokens {
    pub layers: Vec<Vec<u32>>,
}

impl MotionTokens {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let n = self.len();
        for layer in &self.layers {
            if layer.len() != n {
                return Err(Error::invalid("token layers differ in length"));
            }
            if let Some(bad) = layer.iter().find(|&&t| t as usize >= k) {
                return Err(Error::invalid(format!("token {bad} outside codebook of size {k}")));
            }
        }
        Ok(())
    }
}

pub fn quantize_layer(residual: &[f32], codebook: &Codebook) -> Result<(Vec<u32>, Vec<f32>)> {
    let dim = codebook.dim();
    if residual.len() % dim != 0 {
        return Err(Error::Shape {
            what: "quantizer input width".into(),
            expected: dim,
            found: residual.len() % dim,
        });
    }
    let rows = residual.len() / dim;
    let mut indices = Vec::with_capacity(rows);
    let mut quantized = Vec::with_capacity(residual.len());
    for r in 0..rows {
        let idx = codebook.nearest(&residual[r * dim..(r + 1) * dim]);
        indices.push(idx as u32);
        quantized.extend_from_slice(codebook.entry(idx));
    }
    Ok((indices, quantized))
}

/// Output of residual quantization over every layer.
#[derive(Debug, Clone)]
pub struct ResidualEncoding {
    pub tokens: MotionTokens,
    /// Quantized vectors of each layer, `n x dim` each.
    pub quantized: Vec<Vec<f32>>,
    /// Input to each layer (the running residual before that layer).
    pub layer_inputs: Vec<Vec<f32>>,
    pub final_residual: Vec<f32>,
}

impl ResidualEncoding {
    pub fn quantized_sum(&self) -> Vec<f32> {
        let mut sum = vec![0.0f32; self.final_residual.len()];
        for q in &self.quantized {
            sum.iter_mut().zip(q).for_each(|(s, v)| *s += v);
        }
        sum
    }
}

pub fn rvq_encode(z: &[f32], codebooks: &[Codebook]) -> Result<ResidualEncoding> {
    let first = codebooks
        .first()
        .ok_or_else(|| Error::invalid("residual quantizer needs at least one codebook"))?;
    if codebooks.iter().any(|c| c.dim() != first.dim()) {
        return Err(Error::invalid("codebooks disagree on entry width"));
    }
    let mut residual = z.to_vec();
    let mut layers = Vec::with_capacity(codebooks.len());
    let mut quantized = Vec::with_capacity(codebooks.len());
    let mut layer_inputs = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        let (idx, q) = quantize_layer(&residual, cb)?;
        layer_inputs.push(residual.clone());
        residual.iter_mut().zip(&q).for_each(|(r, v)| *r -= v);
        layers.push(idx);
        quantized.push(q);
    }
    Ok(ResidualEncoding {
        tokens: MotionTokens { layers },
        quantized,
        layer_inputs,
        final_residual: residual,
    })
}

/// Sum of the selected entries over every layer, `n x dim`.
pub fn lookup_sum(tokens: &MotionTokens, codebooks: &[Codebook]) -> Result<Vec<f32>> {
    if tokens.depth() > codebooks.len() {
        return Err(Error::invalid(format!(
            "{} token layers but only {} codebooks",
            tokens.depth(),
            codebooks.len()
        )));
    }
    let dim = codebooks[0].dim();
    let mut out = vec![0.0f32; tokens.len() * dim];
    for (layer, cb) in tokens.layers.iter().zip(codebooks) {
        for (pos, &t) in layer.iter().enumerate() {
            if t as usize >= cb.size() {
                return Err(Error::invalid(format!("token {t} outside codebook")));
            }
            for (o, &e) in out[pos * dim..(pos + 1) * dim].iter_mut().zip(cb.entry(t as usize)) {
                *o += e;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn brute_force(v: &[f32], entries: &[f32], dim: usize) -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        for (k, e) in entries.chunks(dim).enumerate() {
            let mut d = 0.0f64;
            for i in 0..dim {
                d += (v[i] as f64 - e[i] as f64).powi(2);
            }
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    fn randn(rng: &mut crate::rng::Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn two_entry_example() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (idx, q) = quantize_layer(&[0.9, 0.8], &cb).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(q, vec![1.0, 1.0]);
    }

    #[test]
    fn exact_entry_gives_zero_residual_and_ties_pick_lowest() {
        let cb = Codebook::new(3, 2, vec![1.0, 2.0, 5.0, 5.0, 1.0, 2.0]).unwrap();
        let enc = rvq_encode(&[1.0, 2.0], std::slice::from_ref(&cb)).unwrap();
        assert_eq!(enc.tokens.layers[0], vec![0]);
        assert!(enc.final_residual.iter().all(|&r| r == 0.0));
        // equidistant from entries 0 and 1
        let cb = Codebook::new(2, 1, vec![-1.0, 1.0]).unwrap();
        assert_eq!(quantize_layer(&[0.0], &cb).unwrap().0, vec![0]);
    }

    #[test]
    fn random_vectors_match_exhaustive_search() {
        let mut rng = substream(1, "q");
        let entries = randn(&mut rng, 7 * 5);
        let cb = Codebook::new(7, 5, entries.clone()).unwrap();
        let z = randn(&mut rng, 100 * 5);
        let (idx, _) = quantize_layer(&z, &cb).unwrap();
        for r in 0..100 {
            assert_eq!(idx[r] as usize, brute_force(&z[r * 5..(r + 1) * 5], &entries, 5));
        }
    }

    #[test]
    fn single_layer_depth_and_constructed_sum() {
        let mut rng = substream(2, "q");
        let books: Vec<Codebook> = (0..3)
            .map(|_| Codebook::new(4, 3, randn(&mut rng, 12)).unwrap())
            .collect();
        let one = rvq_encode(&[0.3, -0.2, 0.9], &books[..1]).unwrap();
        let direct = quantize_layer(&[0.3, -0.2, 0.9], &books[0]).unwrap();
        assert_eq!(one.tokens.layers[0], direct.0);
        assert_eq!(one.quantized[0], direct.1);

        // scale layers apart so greedy quantization recovers the construction
        let scaled: Vec<Codebook> = books
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let s = 100f32.powi(-(l as i32));
                Codebook::new(4, 3, b.entries().iter().map(|v| v * s).collect()).unwrap()
            })
            .collect();
        let mut z = vec![0.0f32; 3];
        for (l, b) in scaled.iter().enumerate() {
            z.iter_mut().zip(b.entry(l + 1)).for_each(|(a, e)| *a += e);
        }
        let enc = rvq_encode(&z, &scaled).unwrap();
        assert_eq!(
            enc.tokens.layers,
            vec![vec![1u32], vec![2], vec![3]]
        );
        assert!(enc.final_residual.iter().all(|r| r.abs() < 1e-6));
    }

    #[test]
    fn residual_norms_do_not_grow_with_zero_entries() {
        let mut rng = substream(3, "q");
        let books: Vec<Codebook> = (0..4)
            .map(|_| {
                let mut e = randn(&mut rng, 8 * 4);
                e[..4].fill(0.0);
                Codebook::new(8, 4, e).unwrap()
            })
            .collect();
        let z = randn(&mut rng, 20 * 4);
        let enc = rvq_encode(&z, &books).unwrap();
        for row in 0..20 {
            let norm = |v: &[f32]| v[row * 4..(row + 1) * 4].iter().map(|x| x * x).sum::<f32>().sqrt();
            let mut prev = norm(&z);
            for l in 1..4 {
                let cur = norm(&enc.layer_inputs[l]);
                assert!(cur <= prev + 1e-6);
                prev = cur;
            }
            assert!(norm(&enc.final_residual) <= prev + 1e-6);
        }
    }

    #[test]
    fn ema_with_unit_decay_is_identity() {
        let mut rng = substream(4, "q");
        let mut cb = Codebook::new(4, 2, randn(&mut rng, 8)).unwrap();
        let before = cb.clone();
        cb.ema_update(&randn(&mut rng, 6), &[0, 1, 1], 1.0).unwrap();
        assert_eq!(cb, before);
    }

    #[test]
    fn ema_pulls_entries_toward_assigned_means() {
        let mut cb = Codebook::new(2, 1, vec![0.0, 10.0]).unwrap();
        for _ in 0..2000 {
            cb.ema_update(&[4.0, 6.0], &[0, 0], 0.99).unwrap();
        }
        assert!((cb.entry(0)[0] - 5.0).abs() < 1e-3);
        assert!((cb.entry(1)[0] - 10.0).abs() < 1e-4);
    }

    #[test]
    fn reset_only_touches_dead_codes() {
        let mut rng = substream(5, "q");
        let live = Codebook::with_state(3, 2, vec![0.0; 6], vec![2.0, 3.0, 1.5], vec![0.0; 6]).unwrap();
        let mut all_used = live.clone();
        assert!(all_used.reset_dead(1.0, &[9.0, 9.0], &mut rng).unwrap().is_empty());
        assert_eq!(all_used, live);

        let mut one_dead =
            Codebook::with_state(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0], vec![2.0, 0.0, 1.5], vec![0.0; 6]).unwrap();
        let replaced = one_dead.reset_dead(1.0, &[7.0, 8.0], &mut rng).unwrap();
        assert_eq!(replaced, vec![1]);
        assert_eq!(one_dead.entries(), &[1.0, 1.0, 7.0, 8.0, 3.0, 3.0]);
    }

    #[test]
    fn lookup_sum_matches_encoding() {
        let mut rng = substream(6, "q");
        let books: Vec<Codebook> = (0..3).map(|_| Codebook::new(5, 3, randn(&mut rng, 15)).unwrap()).collect();
        let z = randn(&mut rng, 9 * 3);
        let enc = rvq_encode(&z, &books).unwrap();
        assert_eq!(lookup_sum(&enc.tokens, &books).unwrap(), enc.quantized_sum());
        assert!(Codebook::new(1, 3, vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn quantize_agrees_with_brute_force(
            k in 2usize..12,
            dim in 1usize..6,
            seed in 0u64..10_000,
            dup in proptest::bool::ANY,
        ) {
            let mut rng = substream(seed, "prop");
            let mut entries = randn(&mut rng, k * dim);
            if dup {
                // force exact ties
                let (a, b) = entries.split_at_mut(dim);
                b[..dim].copy_from_slice(a);
            }
            let cb = Codebook::new(k, dim, entries.clone()).unwrap();
            let mut z = randn(&mut rng, 10 * dim);
            z[..dim].copy_from_slice(&entries[..dim]);
            let (idx, _) = quantize_layer(&z, &cb).unwrap();
            for r in 0..10 {
                prop_assert_eq!(idx[r] as usize, brute_force(&z[r * dim..(r + 1) * dim], &entries, dim));
            }
        }

        #[test]
        fn residual_decomposition_is_exact(seed in 0u64..10_000, depth in 1usize..5) {
            let mut rng = substream(seed, "decomp");
            let books: Vec<Codebook> = (0..depth).map(|_| Codebook::new(6, 4, randn(&mut rng, 24)).unwrap()).collect();
            let z = randn(&mut rng, 12 * 4);
            let enc = rvq_encode(&z, &books).unwrap();
            let sum = enc.quantized_sum();
            let err: f32 = z.iter().zip(&sum).zip(&enc.final_residual).map(|((a, s), r)| (a - s - r).powi(2)).sum::<f32>().sqrt();
            let norm: f32 = z.iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!(err <= 1e-5 * norm);
        }
    }
}
