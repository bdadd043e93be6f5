//! Frequency-domain machinery: 2-D DFT, focal frequency loss, Gaussian
//! low-pass kernels with learnable sigma, spectrum loss, and the dynamic
//! spectrum loss summed over decoder levels. Everything on the tape path
//! is differentiable end-to-end, including through sigma.

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Lower bound on learnable sigma; positivity is enforced by the
/// softplus reparameterization `sigma = softplus(rho) + SIGMA_MIN`.
pub const SIGMA_MIN: f64 = 0.3;

/// Complex 2-D frequency representation; DC sits at index (0,0).
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl Spectrum {
    /// Per-cell modulus |F|.
    pub fn magnitude(&self) -> Tensor {
        Tensor::from_fn(self.re.shape(), |i| {
            let r = self.re.data()[i];
            let m = self.im.data()[i];
            (r * r + m * m).sqrt()
        })
    }

    /// Largest |F(u,v) − conj(F(−u,−v))| component over all cells; zero
    /// for the transform of a real signal up to rounding.
    pub fn max_conjugate_violation(&self) -> f64 {
        let shape = self.re.shape();
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = self.re.numel() / (m * n);
        let mut worst = 0.0f64;
        for p in 0..planes {
            let re = &self.re.data()[p * m * n..(p + 1) * m * n];
            let im = &self.im.data()[p * m * n..(p + 1) * m * n];
            for u in 0..m {
                for v in 0..n {
                    let mu = (m - u) % m;
                    let mv = (n - v) % n;
                    worst = worst.max((re[u * n + v] - re[mu * n + mv]).abs());
                    worst = worst.max((im[u * n + v] + im[mu * n + mv]).abs());
                }
            }
        }
        worst
    }
}

/// Unnormalized forward 2-D DFT of the last two dims, value level.
pub fn dft2_value(x: &Tensor) -> Result<Spectrum> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("dft2 needs ≥2 dims, got {shape:?}")));
    }
    let m = shape[shape.len() - 2];
    let n = shape[shape.len() - 1];
    let planes = x.numel() / (m * n);
    let mut re = Tensor::zeros(shape);
    let mut im = Tensor::zeros(shape);
    for p in 0..planes {
        let src = &x.data()[p * m * n..(p + 1) * m * n];
        re.data_mut()[p * m * n..(p + 1) * m * n]
            .copy_from_slice(&crate::tensor::dft_re_map(src, m, n));
        im.data_mut()[p * m * n..(p + 1) * m * n]
            .copy_from_slice(&crate::tensor::dft_im_map(src, m, n));
    }
    Ok(Spectrum { re, im })
}

/// Real part of the inverse DFT (value level), for synthesis.
pub fn idft2_value(s: &Spectrum) -> Tensor {
    let shape = s.re.shape();
    let m = shape[shape.len() - 2];
    let n = shape[shape.len() - 1];
    let planes = s.re.numel() / (m * n);
    let mut out = Tensor::zeros(shape);
    for p in 0..planes {
        let re = &s.re.data()[p * m * n..(p + 1) * m * n];
        let im = &s.im.data()[p * m * n..(p + 1) * m * n];
        out.data_mut()[p * m * n..(p + 1) * m * n]
            .copy_from_slice(&crate::tensor::idft2_real(re, im, m, n));
    }
    out
}

/// Tape-level DFT returning (re, im) planes.
pub fn dft2(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    Ok((tape.dft2_re(x)?, tape.dft2_im(x)?))
}

// ── Focal frequency loss ────────────────────────────────────────────

/// Gradient-flow options for [`ffl`].
#[derive(Clone, Copy, Debug, Default)]
pub struct FflOptions {
    /// Differentiate through the |ΔF| modulating factor instead of
    /// detaching it (ablation; detached is the default practice).
    pub differentiate_weights: bool,
    /// Scale the detached weights to [0,1] per plane before use.
    pub normalize_weights: bool,
}

/// Focal frequency loss: mean over channels and frequencies of
/// `w(u,v) · |ΔF(u,v)|²` with `w = |ΔF|`, i.e. the mean of |ΔF|³.
/// By default `w` is a detached modulating factor.
pub fn ffl(tape: &mut Tape, a: Var, c: Var, opts: FflOptions) -> Result<Var> {
    let sa = tape.shape(a).to_vec();
    if sa != tape.shape(c) {
        return Err(Error::Shape(format!("ffl operands {:?} vs {:?}", sa, tape.shape(c))));
    }
    if sa.len() < 2 {
        return Err(Error::Shape(format!("ffl needs ≥2 dims, got {sa:?}")));
    }
    let diff = tape.sub(a, c)?;
    let (re, im) = dft2(tape, diff)?;
    let re2 = tape.mul(re, re)?;
    let im2 = tape.mul(im, im)?;
    let mag2 = tape.add(re2, im2)?;
    let numel = tape.value(mag2).numel() as f64;

    let weighted = if opts.differentiate_weights {
        // |ΔF|³ as (|ΔF|²)^1.5: its derivative vanishes (not NaNs) at 0.
        let cubed = tape.powf(mag2, 1.5);
        if opts.normalize_weights {
            let scale = normalizer_planes(tape.value(mag2));
            let sc = tape.constant(scale)?;
            tape.mul(cubed, sc)?
        } else {
            cubed
        }
    } else {
        // Weights computed from values only; no sqrt node on the tape.
        let mut w = tape.value(mag2).map(f64::sqrt);
        if opts.normalize_weights {
            normalize_planes(&mut w);
        }
        let wc = tape.constant(w)?;
        tape.mul(wc, mag2)?
    };
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / numel))
}

/// Per-plane 1/max(|ΔF|) factors, full-size, for normalized weights.
fn normalizer_planes(mag2: &Tensor) -> Tensor {
    let shape = mag2.shape();
    let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = mag2.numel() / (m * n);
    let mut out = Tensor::zeros(shape);
    for p in 0..planes {
        let src = &mag2.data()[p * m * n..(p + 1) * m * n];
        let mx = src.iter().fold(0.0f64, |a, &b| a.max(b)).sqrt();
        let f = if mx > 0.0 { 1.0 / mx } else { 0.0 };
        for v in &mut out.data_mut()[p * m * n..(p + 1) * m * n] {
            *v = f;
        }
    }
    out
}

fn normalize_planes(w: &mut Tensor) {
    let shape = w.shape().to_vec();
    let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = w.numel() / (m * n);
    for p in 0..planes {
        let plane = &mut w.data_mut()[p * m * n..(p + 1) * m * n];
        let mx = plane.iter().fold(0.0f64, |a, &b| a.max(b));
        if mx > 0.0 {
            for v in plane.iter_mut() {
                *v /= mx;
            }
        }
    }
}

// ── Gaussian kernels with learnable sigma ───────────────────────────

/// Square low-pass filter of odd side `size`, parameterized by an
/// unconstrained leaf `rho` with `sigma = softplus(rho) + SIGMA_MIN`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianKernel {
    pub size: usize,
    pub rho: Var,
}

impl GaussianKernel {
    pub fn new(tape: &mut Tape, size: usize, init_sigma: f64) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Contract(format!("kernel size {size} must be odd")));
        }
        let rho = tape.leaf(Tensor::scalar(rho_for_sigma(init_sigma)?))?;
        Ok(GaussianKernel { size, rho })
    }

    /// Normalized weight grid as a tape value, differentiable in rho.
    pub fn weights(&self, tape: &mut Tape) -> Result<Var> {
        let sp = tape.softplus(self.rho);
        let sigma = tape.add_scalar(sp, SIGMA_MIN);
        kernel_weights_from_sigma(tape, sigma, self.size)
    }

    pub fn sigma(&self, tape: &Tape) -> f64 {
        sigma_from_rho(tape.value(self.rho).data()[0])
    }
}

pub fn sigma_from_rho(rho: f64) -> f64 {
    (rho.max(0.0) + (-rho.abs()).exp().ln_1p()) + SIGMA_MIN
}

/// Inverse of the softplus reparameterization.
pub fn rho_for_sigma(sigma: f64) -> Result<f64> {
    if sigma <= SIGMA_MIN {
        return Err(Error::Contract(format!(
            "initial sigma {sigma} must exceed SIGMA_MIN {SIGMA_MIN}"
        )));
    }
    let y = sigma - SIGMA_MIN;
    // softplus⁻¹(y) = y + ln(1 − e^{−y}), stable for small and large y.
    Ok(y + (-(-y).exp_m1()).ln())
}

/// Build the normalized kernel grid from a sigma held on the tape.
pub fn kernel_weights_from_sigma(tape: &mut Tape, sigma: Var, size: usize) -> Result<Var> {
    if size % 2 == 0 {
        return Err(Error::Contract(format!("kernel size {size} must be odd")));
    }
    let grid = tape.constant(neg_half_dist2(size))?;
    let s2 = tape.mul(sigma, sigma)?;
    let q = tape.div(grid, s2)?;
    let e = tape.exp(q);
    let z = tape.sum(e);
    tape.div(e, z)
}

/// Value-level kernel grid for a fixed sigma.
pub fn kernel_values(sigma: f64, size: usize) -> Result<Tensor> {
    if size % 2 == 0 {
        return Err(Error::Contract(format!("kernel size {size} must be odd")));
    }
    let g = neg_half_dist2(size);
    let mut w = g.map(|d| (d / (sigma * sigma)).exp());
    let z: f64 = w.data().iter().sum();
    for v in w.data_mut() {
        *v /= z;
    }
    Ok(w)
}

/// Grid of −(x²+y²)/2 with coordinates centered at the kernel midpoint.
fn neg_half_dist2(size: usize) -> Tensor {
    let r = (size as isize - 1) / 2;
    Tensor::from_fn(&[size, size], |i| {
        let y = (i / size) as isize - r;
        let x = (i % size) as isize - r;
        -((x * x + y * y) as f64) / 2.0
    })
}

// ── Spectrum loss and its dynamic variant ───────────────────────────

/// Gaussian smoothing of feature maps: depthwise convolution with the
/// kernel grid, reflect-padded so shape is preserved. Differentiable in
/// both the input and (through the grid) sigma.
pub fn smooth(tape: &mut Tape, x: Var, kernel_weights: Var) -> Result<Var> {
    tape.depthwise_reflect(x, kernel_weights)
}

/// Spectrum loss: FFL of the two smoothed feature maps, one shared kernel.
pub fn spectrum_loss(
    tape: &mut Tape,
    a: Var,
    c: Var,
    k: &GaussianKernel,
    opts: FflOptions,
) -> Result<Var> {
    let w = k.weights(tape)?;
    let sa = smooth(tape, a, w)?;
    let sc = smooth(tape, c, w)?;
    ffl(tape, sa, sc, opts)
}

/// How sigmas are assigned to the two sides of each level's pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaMode {
    /// One sigma per level, applied to both feature maps.
    Shared,
    /// Distinct sigmas for the encoder-side and complement-side maps.
    Pairwise,
}

/// Per-decoder-level learnable sigma parameters.
pub struct SigmaBank {
    pub mode: SigmaMode,
    kernels: Vec<GaussianKernel>,
}

impl SigmaBank {
    /// One kernel per level (shared) or two (pairwise), each of the
    /// given odd size, every sigma starting at `init_sigma`.
    pub fn new(tape: &mut Tape, sizes: &[usize], mode: SigmaMode, init_sigma: f64) -> Result<Self> {
        let mut kernels = Vec::new();
        for &size in sizes {
            kernels.push(GaussianKernel::new(tape, size, init_sigma)?);
            if mode == SigmaMode::Pairwise {
                kernels.push(GaussianKernel::new(tape, size, init_sigma)?);
            }
        }
        Ok(SigmaBank { mode, kernels })
    }

    pub fn levels(&self) -> usize {
        match self.mode {
            SigmaMode::Shared => self.kernels.len(),
            SigmaMode::Pairwise => self.kernels.len() / 2,
        }
    }

    /// The unconstrained rho leaves, for the optimizer.
    pub fn params(&self) -> Vec<Var> {
        self.kernels.iter().map(|k| k.rho).collect()
    }

    pub fn sigmas(&self, tape: &Tape) -> Vec<f64> {
        self.kernels.iter().map(|k| k.sigma(tape)).collect()
    }

    pub fn set_rhos(&self, tape: &mut Tape, rhos: &[f64]) -> Result<()> {
        if rhos.len() != self.kernels.len() {
            return Err(Error::Contract("sigma bank size mismatch".into()));
        }
        for (k, &r) in self.kernels.iter().zip(rhos) {
            tape.set_value(k.rho, Tensor::scalar(r))?;
        }
        Ok(())
    }

    fn level_kernels(&self, level: usize) -> (&GaussianKernel, &GaussianKernel) {
        match self.mode {
            SigmaMode::Shared => (&self.kernels[level], &self.kernels[level]),
            SigmaMode::Pairwise => (&self.kernels[2 * level], &self.kernels[2 * level + 1]),
        }
    }
}

/// Dynamic spectrum loss summed over levels: each pair `(a_i, c_i)` is
/// smoothed with its level's kernel(s) and compared by FFL. With the
/// bank's rhos in the optimized set this is DSL; with them frozen, SL.
/// Returns the total plus the per-level values.
pub fn dsl_total(
    tape: &mut Tape,
    pairs: &[(Var, Var)],
    bank: &SigmaBank,
    opts: FflOptions,
) -> Result<(Var, Vec<f64>)> {
    if pairs.len() != bank.levels() {
        return Err(Error::Contract(format!(
            "{} pairs for a {}-level sigma bank",
            pairs.len(),
            bank.levels()
        )));
    }
    let mut per_level = Vec::with_capacity(pairs.len());
    let mut total = tape.constant(Tensor::scalar(0.0))?;
    for (level, &(a, c)) in pairs.iter().enumerate() {
        if tape.shape(a) != tape.shape(c) {
            return Err(Error::Shape(format!(
                "level {level}: paired maps {:?} vs {:?}",
                tape.shape(a),
                tape.shape(c)
            )));
        }
        let (ka, kc) = bank.level_kernels(level);
        let wa = ka.weights(tape)?;
        let sa = smooth(tape, a, wa)?;
        let sc = if std::ptr::eq(ka, kc) {
            smooth(tape, c, wa)?
        } else {
            let wc = kc.weights(tape)?;
            smooth(tape, c, wc)?
        };
        let l = ffl(tape, sa, sc, opts)?;
        per_level.push(tape.value(l).data()[0]);
        total = tape.add(total, l)?;
    }
    Ok((total, per_level))
}

// ── Frequency-map diagnostics ───────────────────────────────────────

/// Channel handling for [`freq_map`].
#[derive(Clone, Copy, Debug)]
pub enum FreqMapMode {
    /// Average the per-channel log-magnitude maps.
    MeanChannel,
    /// A single channel's map.
    SingleChannel(usize),
}

/// Center-shifted log-magnitude map `log(1+|F|)`, normalized to [0,1].
pub fn freq_map(x: &Tensor, mode: FreqMapMode) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("freq_map needs ≥2 dims, got {shape:?}")));
    }
    let m = shape[shape.len() - 2];
    let n = shape[shape.len() - 1];
    let channels = x.numel() / (m * n);
    let spec = dft2_value(x)?;
    let mag = spec.magnitude();
    let mut map = Tensor::zeros(&[m, n]);
    match mode {
        FreqMapMode::MeanChannel => {
            for c in 0..channels {
                let plane = &mag.data()[c * m * n..(c + 1) * m * n];
                for (o, &v) in map.data_mut().iter_mut().zip(plane) {
                    *o += (1.0 + v).ln() / channels as f64;
                }
            }
        }
        FreqMapMode::SingleChannel(c) => {
            if c >= channels {
                return Err(Error::Contract(format!("channel {c} of {channels}")));
            }
            let plane = &mag.data()[c * m * n..(c + 1) * m * n];
            for (o, &v) in map.data_mut().iter_mut().zip(plane) {
                *o = (1.0 + v).ln();
            }
        }
    }
    // Shift DC to the center, then scale the peak to 1.
    let mut shifted = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let si = (i + m - m / 2) % m;
            let sj = (j + n - n / 2) % n;
            shifted.data_mut()[i * n + j] = map.data()[si * n + sj];
        }
    }
    let mx = shifted.max_abs();
    if mx > 0.0 {
        for v in shifted.data_mut() {
            *v /= mx;
        }
    }
    Ok(shifted)
}

/// Sum of spectrum magnitudes in the low/mid/high thirds of the radial
/// frequency range (radius normalized so the Nyquist corner is 1).
pub fn band_energies(x: &Tensor) -> Result<[f64; 3]> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("band_energies needs ≥2 dims, got {shape:?}")));
    }
    let m = shape[shape.len() - 2];
    let n = shape[shape.len() - 1];
    let planes = x.numel() / (m * n);
    let spec = dft2_value(x)?;
    let mag = spec.magnitude();
    let mut bands = [0.0f64; 3];
    for p in 0..planes {
        let plane = &mag.data()[p * m * n..(p + 1) * m * n];
        for u in 0..m {
            for v in 0..n {
                bands[band_of(u, v, m, n)] += plane[u * n + v];
            }
        }
    }
    Ok(bands)
}

/// Radial band index (0 low, 1 mid, 2 high) of an unshifted frequency cell.
pub fn band_of(u: usize, v: usize, m: usize, n: usize) -> usize {
    let ru = u.min(m - u) as f64 / (m as f64 / 2.0);
    let rv = v.min(n - v) as f64 / (n as f64 / 2.0);
    let r = (ru * ru + rv * rv).sqrt() / std::f64::consts::SQRT_2;
    if r < 1.0 / 3.0 {
        0
    } else if r < 2.0 / 3.0 {
        1
    } else {
        2
    }
}
