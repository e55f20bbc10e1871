//! The Saab transform: a fixed DC (mean) kernel plus PCA-derived AC kernels
//! over the DC-removed signal, with an adjusted-bias constant.

use nalgebra::{DMatrix, DVector};

use crate::error::{PipelineError, Result};

/// A fitted Saab kernel set over flattened patches of length `patch_dim`.
///
/// The DC kernel is the constant vector with entries `1/sqrt(patch_dim)`.
/// AC kernels are orthonormal rows, orthogonal to the DC kernel, ordered by
/// descending energy (covariance eigenvalue).
#[derive(Debug, Clone, PartialEq)]
pub struct SaabKernelSet {
    pub patch_dim: usize,
    /// kept AC channel count K (<= patch_dim - 1)
    pub kept: usize,
    /// K x patch_dim, row-major
    pub ac_kernels: Vec<f64>,
    /// K eigenvalues, non-increasing
    pub energies: Vec<f64>,
    /// variance captured by the DC coefficient
    pub dc_energy: f64,
    /// adjusted-bias constant: max training patch norm * (1 + 1e-6);
    /// recorded and serialized, not added to emitted features
    pub bias: f64,
}

impl SaabKernelSet {
    pub fn dc_entry(&self) -> f64 {
        1.0 / (self.patch_dim as f64).sqrt()
    }

    pub fn dc_kernel(&self) -> Vec<f64> {
        vec![self.dc_entry(); self.patch_dim]
    }

    /// DC + AC channel count.
    pub fn num_channels(&self) -> usize {
        1 + self.kept
    }

    pub fn ac_row(&self, k: usize) -> &[f64] {
        &self.ac_kernels[k * self.patch_dim..(k + 1) * self.patch_dim]
    }

    /// Keep AC channels up to the cumulative-energy fraction `threshold`
    /// of the total (DC + AC) training variance.
    pub fn truncate_to_energy(&self, threshold: f64) -> SaabKernelSet {
        if threshold >= 1.0 {
            return self.clone();
        }
        let total: f64 = self.dc_energy + self.energies.iter().sum::<f64>();
        if total <= 0.0 {
            return self.clone();
        }
        let mut cum = self.dc_energy;
        let mut keep = 0;
        while keep < self.kept && cum < threshold * total {
            cum += self.energies[keep];
            keep += 1;
        }
        SaabKernelSet {
            patch_dim: self.patch_dim,
            kept: keep,
            ac_kernels: self.ac_kernels[..keep * self.patch_dim].to_vec(),
            energies: self.energies[..keep].to_vec(),
            dc_energy: self.dc_energy,
            bias: self.bias,
        }
    }
}

/// Fit a Saab kernel set on `n` flattened patches of length `patch_dim`
/// stored contiguously in `patches`.
///
/// AC kernels are the principal directions of the mean-centered DC-removed
/// patches, computed in an orthonormal basis of the DC complement so that
/// every kernel is exactly orthogonal to the DC direction. Zero-variance
/// input yields a valid kernel set with zero AC channels.
pub fn fit_saab(patches: &[f64], patch_dim: usize, max_channels: usize) -> Result<SaabKernelSet> {
    assert!(patch_dim >= 2, "patch_dim must be >= 2");
    assert_eq!(patches.len() % patch_dim, 0);
    let n = patches.len() / patch_dim;
    if n < 2 {
        return Err(PipelineError::InvalidInput(format!(
            "fit_saab needs at least 2 patches, got {n}"
        )));
    }
    let d = patch_dim;
    let dc = 1.0 / (d as f64).sqrt();

    // orthonormal basis of the DC complement from the Householder reflection
    // mapping e0 to the DC direction; columns 1..d of the reflection matrix
    let mut v = vec![-dc; d];
    v[0] = 1.0 - dc;
    let vnorm2: f64 = v.iter().map(|x| x * x).sum();
    // basis[j] = e_{j+1} - 2 v (v[j+1]) / |v|^2, j in 0..d-1
    let basis: Vec<Vec<f64>> = (1..d)
        .map(|j| {
            let coef = 2.0 * v[j] / vnorm2;
            let mut col: Vec<f64> = v.iter().map(|&vi| -coef * vi).collect();
            col[j] += 1.0;
            col
        })
        .collect();

    let mut bias: f64 = 0.0;
    // project DC-removed patches onto the complement basis
    let m = d - 1;
    let mut projected = vec![0.0f64; n * m];
    for (i, patch) in patches.chunks_exact(d).enumerate() {
        let norm: f64 = patch.iter().map(|x| x * x).sum::<f64>().sqrt();
        bias = bias.max(norm);
        for (j, col) in basis.iter().enumerate() {
            // col is orthogonal to DC, so projecting the raw patch equals
            // projecting the DC-removed patch
            let mut s = 0.0;
            for (a, b) in patch.iter().zip(col) {
                s += a * b;
            }
            projected[i * m + j] = s;
        }
    }
    bias *= 1.0 + 1e-6;

    // mean-center in the complement space
    let mut mean = vec![0.0f64; m];
    for row in projected.chunks_exact(m) {
        for (mu, &x) in mean.iter_mut().zip(row) {
            *mu += x;
        }
    }
    for mu in &mut mean {
        *mu /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(m, m);
    for row in projected.chunks_exact(m) {
        for a in 0..m {
            let ra = row[a] - mean[a];
            for b in a..m {
                cov[(a, b)] += ra * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..m {
        for b in a..m {
            let val = cov[(a, b)] / n as f64;
            cov[(a, b)] = val;
            cov[(b, a)] = val;
        }
    }
    let trace: f64 = (0..m).map(|i| cov[(i, i)]).sum();

    let eig = cov.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let tol = 1e-12 * trace.max(1.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > tol)
        .count();
    let kept = rank.min(max_channels).min(m);

    let mut ac_kernels = Vec::with_capacity(kept * d);
    let mut energies = Vec::with_capacity(kept);
    for &oi in order.iter().take(kept) {
        let w: DVector<f64> = eig.eigenvectors.column(oi).into();
        // map back to patch space
        let mut kernel = vec![0.0f64; d];
        for (j, col) in basis.iter().enumerate() {
            let wj = w[j];
            for (k, &c) in kernel.iter_mut().zip(col) {
                *k += wj * c;
            }
        }
        // deterministic sign: largest-magnitude entry is positive
        let mut arg = 0;
        for (i, &x) in kernel.iter().enumerate() {
            if x.abs() > kernel[arg].abs() {
                arg = i;
            }
        }
        if kernel[arg] < 0.0 {
            kernel.iter_mut().for_each(|x| *x = -*x);
        }
        ac_kernels.extend_from_slice(&kernel);
        energies.push(eig.eigenvalues[oi].max(0.0));
    }

    // DC energy: variance of the DC coefficient over training patches
    let dc_coefs: Vec<f64> = patches
        .chunks_exact(d)
        .map(|p| p.iter().sum::<f64>() * dc)
        .collect();
    let dc_mean = dc_coefs.iter().sum::<f64>() / n as f64;
    let dc_energy = dc_coefs.iter().map(|c| (c - dc_mean).powi(2)).sum::<f64>() / n as f64;

    Ok(SaabKernelSet {
        patch_dim: d,
        kept,
        ac_kernels,
        energies,
        dc_energy,
        bias,
    })
}

/// Transform one patch: `[dc_kernel . patch, ac_kernels . patch]`.
pub fn apply_saab(k: &SaabKernelSet, patch: &[f64]) -> Result<Vec<f64>> {
    if patch.len() != k.patch_dim {
        return Err(PipelineError::DimsMismatch(format!(
            "patch length {} does not match kernel patch_dim {}",
            patch.len(),
            k.patch_dim
        )));
    }
    let mut out = Vec::with_capacity(1 + k.kept);
    out.push(patch.iter().sum::<f64>() * k.dc_entry());
    for row in 0..k.kept {
        let kernel = k.ac_row(row);
        let mut s = 0.0;
        for (a, b) in patch.iter().zip(kernel) {
            s += a * b;
        }
        out.push(s);
    }
    Ok(out)
}

/// Same transform without the dims check, for hot inner loops.
#[inline]
pub fn apply_saab_into(k: &SaabKernelSet, patch: &[f64], out: &mut Vec<f64>) {
    debug_assert_eq!(patch.len(), k.patch_dim);
    out.push(patch.iter().sum::<f64>() * k.dc_entry());
    for row in 0..k.kept {
        let kernel = k.ac_row(row);
        let mut s = 0.0;
        for (a, b) in patch.iter().zip(kernel) {
            s += a * b;
        }
        out.push(s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patches(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dc_kernel_for_6x6_window() {
        let patches = random_patches(10, 36, 1);
        let k = fit_saab(&patches, 36, 35).unwrap();
        for &e in &k.dc_kernel() {
            assert!((e - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_patches_give_zero_ac_channels() {
        let patches = vec![3.5; 5 * 16];
        let k = fit_saab(&patches, 16, 15).unwrap();
        assert_eq!(k.kept, 0);
        let coeffs = apply_saab(&k, &vec![3.5; 16]).unwrap();
        assert_eq!(coeffs.len(), 1);
        assert!((coeffs[0] - 3.5 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_patches_rejected() {
        assert!(fit_saab(&[1.0; 8], 8, 7).is_err());
    }

    #[test]
    fn ac_energy_sum_matches_covariance_trace_oracle() {
        let d = 36;
        let n = 500;
        let patches = random_patches(n, d, 2);
        let k = fit_saab(&patches, d, d - 1).unwrap();

        // oracle: trace of the covariance of mean-centered DC-removed patches
        let dc = 1.0 / (d as f64).sqrt();
        let mut removed: Vec<Vec<f64>> = patches
            .chunks_exact(d)
            .map(|p| {
                let c: f64 = p.iter().sum::<f64>() * dc;
                p.iter().map(|&x| x - c * dc).collect()
            })
            .collect();
        let mut mean = vec![0.0; d];
        for r in &removed {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n as f64;
            }
        }
        for r in &mut removed {
            for (x, m) in r.iter_mut().zip(&mean) {
                *x -= m;
            }
        }
        let trace: f64 = removed
            .iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        let sum: f64 = k.energies.iter().sum();
        assert!(
            ((sum - trace) / trace).abs() < 1e-6,
            "sum {sum} vs trace {trace}"
        );
    }

    #[test]
    fn kernel_gram_matrix_is_identity() {
        let d = 36;
        let patches = random_patches(400, d, 3);
        let k = fit_saab(&patches, d, d - 1).unwrap();
        let dc = k.dc_kernel();
        for i in 0..k.kept {
            let ri = k.ac_row(i);
            let norm: f64 = ri.iter().map(|x| x * x).sum::<f64>();
            assert!((norm.sqrt() - 1.0).abs() < 1e-10);
            let dcdot: f64 = ri.iter().zip(&dc).map(|(a, b)| a * b).sum();
            assert!(dcdot.abs() < 1e-8);
            for j in 0..i {
                let rj = k.ac_row(j);
                let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-8, "rows {i},{j} dot {dot}");
            }
        }
        // energies non-increasing
        for w in k.energies.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn constant_input_has_zero_ac_response() {
        let d = 16;
        let patches = random_patches(200, d, 4);
        let k = fit_saab(&patches, d, d - 1).unwrap();
        let ones = vec![1.0; d];
        let coeffs = apply_saab(&k, &ones).unwrap();
        assert!((coeffs[0] - (d as f64).sqrt()).abs() < 1e-12);
        for &c in &coeffs[1..] {
            assert!(c.abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_row_maps_to_unit_coefficient() {
        let d = 16;
        let patches = random_patches(200, d, 5);
        let k = fit_saab(&patches, d, d - 1).unwrap();
        let row0 = k.ac_row(0).to_vec();
        let coeffs = apply_saab(&k, &row0).unwrap();
        assert!((coeffs[1] - 1.0).abs() < 1e-8);
        for (i, &c) in coeffs[2..].iter().enumerate() {
            assert!(c.abs() < 1e-8, "channel {} = {}", i + 2, c);
        }
    }

    #[test]
    fn parseval_with_all_channels() {
        let d = 25;
        let patches = random_patches(300, d, 6);
        let k = fit_saab(&patches, d, d - 1).unwrap();
        assert_eq!(k.kept, d - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let coeffs = apply_saab(&k, &p).unwrap();
            let cn: f64 = coeffs.iter().map(|x| x * x).sum();
            let pn: f64 = p.iter().map(|x| x * x).sum();
            assert!(((cn - pn) / pn).abs() < 1e-6, "{cn} vs {pn}");
        }
    }

    #[test]
    fn transform_is_linear() {
        let d = 16;
        let patches = random_patches(100, d, 8);
        let k = fit_saab(&patches, d, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let cx = apply_saab(&k, &x).unwrap();
        let cy = apply_saab(&k, &y).unwrap();
        let cs = apply_saab(&k, &sum).unwrap();
        for i in 0..cs.len() {
            assert!((cs[i] - cx[i] - cy[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn energy_truncation_keeps_prefix() {
        let d = 16;
        let patches = random_patches(300, d, 10);
        let k = fit_saab(&patches, d, d - 1).unwrap();
        let t = k.truncate_to_energy(0.9);
        assert!(t.kept <= k.kept);
        assert_eq!(t.energies, k.energies[..t.kept].to_vec());
        let full = k.truncate_to_energy(1.0);
        assert_eq!(full.kept, k.kept);
    }

    #[test]
    fn length_mismatch_rejected() {
        let patches = random_patches(10, 8, 11);
        let k = fit_saab(&patches, 8, 4).unwrap();
        assert!(apply_saab(&k, &[0.0; 7]).is_err());
    }
}
