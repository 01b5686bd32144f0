//! Power-constrained complex AWGN channel.
//!
//! A frame holds the `L` complex symbols of one item. Real-valued codec
//! outputs of width `2L` map onto a frame with the first `L` reals as real
//! parts and the last `L` as imaginary parts, so the two views share one
//! Euclidean norm and all per-item operations can run on either.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::math::{self, Stream};
use crate::tokens::ImageSpec;

/// `L` complex channel symbols for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFrame {
    symbols: Vec<Complex64>,
}

impl ChannelFrame {
    pub fn new(symbols: Vec<Complex64>) -> Self {
        Self { symbols }
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    /// Number of channel uses `L`.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.symbols.iter().map(Complex64::norm_sqr).sum()
    }

    /// Average power per symbol, `||z||^2 / L`.
    pub fn power(&self) -> f64 {
        self.energy() / self.symbols.len() as f64
    }
}

/// Fading models can be added here without changing the transmit API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChannelKind {
    Awgn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// SNR in dB; `+inf` means a noiseless channel.
    pub snr_db: f64,
    pub power: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64, power: f64, seed: u64) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "channel power must be positive, got {power}"
            )));
        }
        if snr_db.is_nan() {
            return Err(Error::InvalidArgument("SNR is NaN".into()));
        }
        Ok(Self {
            kind: ChannelKind::Awgn,
            snr_db,
            power,
            seed,
        })
    }

    pub fn noise_variance(&self) -> f64 {
        snr_to_noise_variance(self.snr_db, self.power)
    }
}

pub fn pack_complex(reals: &[f64]) -> Result<ChannelFrame> {
    if !reals.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "cannot pack an odd number ({}) of reals into complex symbols",
            reals.len()
        )));
    }
    let l = reals.len() / 2;
    let (re, im) = reals.split_at(l);
    Ok(ChannelFrame::new(
        re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect(),
    ))
}

pub fn unpack_complex(frame: &ChannelFrame) -> Vec<f64> {
    frame
        .symbols
        .iter()
        .map(|z| z.re)
        .chain(frame.symbols.iter().map(|z| z.im))
        .collect()
}

/// Scale a frame so that its per-symbol power equals `power`.
pub fn power_normalize(frame: &ChannelFrame, power: f64) -> Result<ChannelFrame> {
    let e = frame.energy();
    if e == 0.0 {
        return Err(Error::ZeroNorm("power_normalize"));
    }
    let scale = (frame.len() as f64 * power).sqrt() / e.sqrt();
    Ok(ChannelFrame::new(
        frame.symbols.iter().map(|z| z * scale).collect(),
    ))
}

/// [`power_normalize`] on the packed real view (`2L` reals).
pub fn power_normalize_reals(x: &[f64], power: f64) -> Result<Vec<f64>> {
    let n = math::norm(x);
    if n == 0.0 {
        return Err(Error::ZeroNorm("power_normalize"));
    }
    let l = x.len() / 2;
    let scale = (l as f64 * power).sqrt() / n;
    Ok(x.iter().map(|v| v * scale).collect())
}

/// Vector-Jacobian product of [`power_normalize_reals`] at `x`.
///
/// With `y = c x / ||x||`, `dx = c / ||x|| * (dy - u (u . dy))`, `u = x / ||x||`.
pub fn power_normalize_backward(x: &[f64], dy: &[f64], power: f64) -> Vec<f64> {
    let n = math::norm(x);
    let l = x.len() / 2;
    let c = (l as f64 * power).sqrt() / n;
    let proj = math::dot(x, dy) / (n * n);
    x.iter()
        .zip(dy)
        .map(|(xi, gi)| c * (gi - xi * proj))
        .collect()
}

/// `sigma^2 = P * 10^(-snr/10)`.
pub fn snr_to_noise_variance(snr_db: f64, power: f64) -> f64 {
    power * 10f64.powf(-snr_db / 10.0)
}

/// Complex Gaussian noise `CN(0, sigma^2)` in the packed real layout
/// (real parts first). Each symbol draws its real then imaginary component.
pub fn complex_noise(l: usize, noise_variance: f64, rng: &mut Stream) -> Vec<f64> {
    let mut out = vec![0.0; 2 * l];
    if noise_variance == 0.0 {
        return out;
    }
    let sd = (noise_variance / 2.0).sqrt();
    for i in 0..l {
        out[i] = sd * rng.sample::<f64, _>(StandardNormal);
        out[l + i] = sd * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

/// `z_hat = z + n` with noise drawn from the caller's stream.
pub fn awgn_transmit(frame: &ChannelFrame, cfg: &ChannelConfig, rng: &mut Stream) -> ChannelFrame {
    match cfg.kind {
        ChannelKind::Awgn => {
            let sigma2 = cfg.noise_variance();
            if sigma2 == 0.0 {
                return frame.clone();
            }
            let l = frame.len();
            let noise = complex_noise(l, sigma2, rng);
            ChannelFrame::new(
                frame
                    .symbols
                    .iter()
                    .enumerate()
                    .map(|(i, z)| z + Complex64::new(noise[i], noise[l + i]))
                    .collect(),
            )
        }
    }
}

/// [`awgn_transmit`] with a stream seeded from `cfg.seed`.
pub fn awgn_transmit_seeded(frame: &ChannelFrame, cfg: &ChannelConfig) -> ChannelFrame {
    let mut rng = math::substream(cfg.seed, "awgn");
    awgn_transmit(frame, cfg, &mut rng)
}

/// Channel uses per source dimension, `L / (C W H)`.
pub fn bandwidth_ratio(channel_uses: usize, spec: &ImageSpec) -> f64 {
    channel_uses as f64 / spec.source_dim() as f64
}

/// Empirical channel statistics over one long random frame.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub configured_snr_db: f64,
    pub measured_snr_db: f64,
    pub symbols: usize,
    pub power: f64,
    pub signal_power: f64,
    pub noise_variance: f64,
    pub measured_noise_variance: f64,
    pub noise_mean_re: f64,
    pub noise_mean_im: f64,
    pub seed: u64,
}

/// Send `symbols` random power-normalized symbols through the channel and
/// measure the realized SNR and noise moments.
pub fn probe(cfg: &ChannelConfig, symbols: usize) -> Result<ProbeReport> {
    if symbols == 0 {
        return Err(Error::InvalidArgument("probe needs at least one symbol".into()));
    }
    let mut rng = math::substream(cfg.seed, "probe-signal");
    let raw: Vec<f64> = (0..2 * symbols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let frame = power_normalize(&pack_complex(&raw)?, cfg.power)?;
    let received = awgn_transmit_seeded(&frame, cfg);

    let (mut sum_re, mut sum_im, mut energy) = (0.0, 0.0, 0.0);
    for (z, zh) in frame.symbols().iter().zip(received.symbols()) {
        let n = zh - z;
        sum_re += n.re;
        sum_im += n.im;
        energy += n.norm_sqr();
    }
    let count = symbols as f64;
    Ok(ProbeReport {
        configured_snr_db: cfg.snr_db,
        measured_snr_db: 10.0 * (frame.energy() / energy).log10(),
        symbols,
        power: cfg.power,
        signal_power: frame.power(),
        noise_variance: cfg.noise_variance(),
        measured_noise_variance: energy / count,
        noise_mean_re: sum_re / count,
        noise_mean_im: sum_im / count,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_layout() {
        let f = pack_complex(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            f.symbols(),
            &[Complex64::new(1.0, 3.0), Complex64::new(2.0, 4.0)]
        );
        assert_eq!(unpack_complex(&f), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pack_rejects_odd_length() {
        assert!(pack_complex(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn normalize_two_symbol_example() {
        let f = ChannelFrame::new(vec![Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)]);
        let g = power_normalize(&f, 1.0).unwrap();
        assert!((g.symbols()[0].re - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(g.symbols()[1], Complex64::new(0.0, 0.0));
        assert!((g.power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_fixed_point_and_zero_frame() {
        let f = ChannelFrame::new(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, -1.0)]);
        let g = power_normalize(&f, 1.0).unwrap();
        for (a, b) in f.symbols().iter().zip(g.symbols()) {
            assert!((a - b).norm() < 1e-7);
        }
        let z = ChannelFrame::new(vec![Complex64::new(0.0, 0.0); 3]);
        assert!(matches!(power_normalize(&z, 1.0), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn noise_variance_values() {
        assert_eq!(snr_to_noise_variance(0.0, 1.0), 1.0);
        assert!((snr_to_noise_variance(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert!((snr_to_noise_variance(-5.0, 1.0) - 3.162_277_660_168_379).abs() < 1e-12);
        assert_eq!(snr_to_noise_variance(f64::INFINITY, 1.0), 0.0);
    }

    #[test]
    fn noiseless_channel_is_identity() {
        let f = pack_complex(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        let cfg = ChannelConfig::awgn(f64::INFINITY, 1.0, 4).unwrap();
        assert_eq!(awgn_transmit_seeded(&f, &cfg), f);
    }

    #[test]
    fn config_rejects_nonpositive_power() {
        assert!(ChannelConfig::awgn(0.0, 0.0, 1).is_err());
        assert!(ChannelConfig::awgn(0.0, -1.0, 1).is_err());
    }

    #[test]
    fn frame_and_real_noise_paths_agree() {
        let reals = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let f = pack_complex(&reals).unwrap();
        let cfg = ChannelConfig::awgn(3.0, 1.0, 11).unwrap();
        let a = unpack_complex(&awgn_transmit(&f, &cfg, &mut math::stream(5)));
        let n = complex_noise(3, cfg.noise_variance(), &mut math::stream(5));
        for i in 0..6 {
            assert_eq!(a[i], reals[i] + n[i]);
        }
    }

    #[test]
    fn bandwidth_ratio_values() {
        let spec = ImageSpec::new(336, 336, 3).unwrap();
        assert!((bandwidth_ratio(384, &spec) - 384.0 / 338_688.0).abs() < 1e-18);
        assert_eq!(bandwidth_ratio(spec.source_dim(), &spec), 1.0);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = [0.3, -1.2, 0.7, 2.0];
        let dy = [0.5, 0.1, -0.4, 0.9];
        let analytic = power_normalize_backward(&x, &dy, 1.5);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fp = math::dot(&power_normalize_reals(&xp, 1.5).unwrap(), &dy);
            let fm = math::dot(&power_normalize_reals(&xm, 1.5).unwrap(), &dy);
            assert!((analytic[i] - (fp - fm) / (2.0 * h)).abs() < 1e-8);
        }
    }
}
