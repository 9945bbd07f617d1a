//! Evaluation: compact clip features, streaming Gaussian statistics with a
//! Fréchet distance between them, caption-vs-motion agreement, and plain
//! reconstruction metrics.
//!
//! Matrix square roots come from a self-contained Jacobi eigendecomposition,
//! so tests can check the distance against an independent linear-algebra
//! oracle.

use ndarray::Array2;
use rand::Rng;

use crate::codec::VideoClip;
use crate::error::{Error, Result};
use crate::synth::{parse_caption, Direction};
use crate::util::seeded_rng;

// ---------------------------------------------------------------------------
// Clip features

/// Pooled grid side; raw features are two 8x8x3 maps.
const POOL: usize = 8;
/// Raw feature width before projection.
pub const FEATURE_RAW: usize = 2 * POOL * POOL * 3;
/// Projected feature width.
pub const FEATURE_DIM: usize = 16;

/// A frozen Gaussian map from raw pooled features to a compact vector.
/// Same seed, same projection, on any machine.
#[derive(Debug, Clone)]
pub struct FeatureProjector {
    mat: Array2<f64>,
    seed: u64,
}

impl FeatureProjector {
    pub fn new(seed: u64) -> FeatureProjector {
        let mut rng = seeded_rng(seed, "feature-proj");
        let scale = 1.0 / (FEATURE_RAW as f64).sqrt();
        let mut mat = Array2::zeros((FEATURE_RAW, FEATURE_DIM));
        for v in mat.iter_mut() {
            // Box-Muller pair, first component only: keeps the stream simple.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            *v = scale
                * (-2.0 * u1.ln()).sqrt()
                * (2.0 * std::f64::consts::PI * u2).cos();
        }
        FeatureProjector { mat, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Project a clip: average frame and average absolute frame difference,
    /// each pooled to 8x8 per channel, concatenated, then mapped down.
    pub fn features(&self, clip: &VideoClip) -> Result<Vec<f64>> {
        let (t, h, w, _) = clip.frames.dim();
        if h < POOL || w < POOL {
            return Err(Error::shape(format!(
                "clip {h}x{w} is smaller than the {POOL}x{POOL} pooling grid"
            )));
        }
        let mut raw = vec![0.0; FEATURE_RAW];
        let mut write_pooled = |map: &Array2<f64>, plane: usize, channel: usize| {
            for by in 0..POOL {
                for bx in 0..POOL {
                    let (y0, y1) = (by * h / POOL, (by + 1) * h / POOL);
                    let (x0, x1) = (bx * w / POOL, (bx + 1) * w / POOL);
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += map[[y, x]];
                        }
                    }
                    let cells = ((y1 - y0) * (x1 - x0)) as f64;
                    raw[plane * POOL * POOL * 3 + (by * POOL + bx) * 3 + channel] = sum / cells;
                }
            }
        };
        for c in 0..3 {
            let mut mean = Array2::zeros((h, w));
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        mean[[y, x]] += clip.frames[[ti, y, x, c]];
                    }
                }
            }
            mean.mapv_inplace(|v| v / t as f64);
            write_pooled(&mean, 0, c);

            let mut diff = Array2::zeros((h, w));
            if t > 1 {
                for ti in 0..t - 1 {
                    for y in 0..h {
                        for x in 0..w {
                            diff[[y, x]] +=
                                (clip.frames[[ti + 1, y, x, c]] - clip.frames[[ti, y, x, c]]).abs();
                        }
                    }
                }
                diff.mapv_inplace(|v| v / (t - 1) as f64);
            }
            write_pooled(&diff, 1, c);
        }
        let mut out = vec![0.0; FEATURE_DIM];
        for i in 0..FEATURE_RAW {
            let r = raw[i];
            if r != 0.0 {
                for j in 0..FEATURE_DIM {
                    out[j] += r * self.mat[[i, j]];
                }
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Streaming Gaussian statistics

/// Mean and scatter accumulated one sample at a time. Merging two
/// accumulators gives the same result as one pass over the union.
#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    dim: usize,
    count: usize,
    mean: Vec<f64>,
    /// Sum of outer products of deviations; covariance = m2 / (count - 1).
    m2: Array2<f64>,
}

impl FrechetStats {
    pub fn new(dim: usize) -> FrechetStats {
        FrechetStats {
            dim,
            count: 0,
            mean: vec![0.0; dim],
            m2: Array2::zeros((dim, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// A covariance estimate can only reach full rank once the sample count
    /// reaches the dimension; below that callers should treat it as rough.
    pub fn is_reliable(&self) -> bool {
        self.count >= self.dim
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape(format!(
                "sample has {} components, stats track {}",
                x.len(),
                self.dim
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        // (x - old mean)(x - new mean)^T == (n-1)/n * outer(delta, delta),
        // written in the symmetric form so m2 stays exactly symmetric.
        let scale = (n - 1.0) / n;
        for i in 0..self.dim {
            let di = delta[i] * scale;
            for j in 0..self.dim {
                self.m2[[i, j]] += di * delta[j];
            }
        }
        Ok(())
    }

    pub fn merge(&self, other: &FrechetStats) -> Result<FrechetStats> {
        if self.dim != other.dim {
            return Err(Error::shape(format!(
                "cannot merge stats of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mean: Vec<f64> = self
            .mean
            .iter()
            .zip(&other.mean)
            .map(|(a, b)| (na * a + nb * b) / n)
            .collect();
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let mut m2 = &self.m2 + &other.m2;
        let w = na * nb / n;
        for i in 0..self.dim {
            let di = delta[i] * w;
            for j in 0..self.dim {
                m2[[i, j]] += di * delta[j];
            }
        }
        Ok(FrechetStats {
            dim: self.dim,
            count: self.count + other.count,
            mean,
            m2,
        })
    }

    pub fn covariance(&self) -> Result<Array2<f64>> {
        if self.count < 2 {
            return Err(Error::data(format!(
                "covariance needs at least two samples, have {}",
                self.count
            )));
        }
        Ok(self.m2.mapv(|v| v / (self.count - 1) as f64))
    }

    /// Rebuild an accumulator from stored (count, mean, covariance).
    pub fn from_parts(count: usize, mean: Vec<f64>, covariance: Array2<f64>) -> Result<FrechetStats> {
        let dim = mean.len();
        if covariance.dim() != (dim, dim) {
            return Err(Error::shape(format!(
                "covariance is {:?}, mean has {dim} components",
                covariance.dim()
            )));
        }
        let m2 = if count >= 2 {
            covariance.mapv(|v| v * (count - 1) as f64)
        } else {
            Array2::zeros((dim, dim))
        };
        Ok(FrechetStats { dim, count, mean, m2 })
    }
}

// ---------------------------------------------------------------------------
// Fréchet distance

fn trace(m: &Array2<f64>) -> f64 {
    m.diag().sum()
}

/// Principal square root of a symmetric positive semidefinite matrix via
/// cyclic Jacobi rotations. Singular input is fine: eigenvalues clamp at 0.
fn sqrtm_psd(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    let scale: f64 = (0..n).map(|i| m[[i, i]].abs()).sum::<f64>().max(1e-300);
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = 0.5 * (m[[q, q]] - m[[p, p]]) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += v[[i, k]] * m[[k, k]].max(0.0).sqrt() * v[[j, k]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Squared Fréchet distance between two Gaussians:
/// |mu_a - mu_b|^2 + tr(Ca + Cb - 2 (Ca Cb)^(1/2)).
///
/// The cross term is computed through the symmetric congruence
/// sqrt(Cb) Ca sqrt(Cb), whose root has the same trace as (Ca Cb)^(1/2),
/// so rank-deficient covariances need no regularization.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::shape(format!(
            "stats dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    let ca = a.covariance()?;
    let cb = b.covariance()?;
    let s1 = sqrtm_psd(&cb);
    let inner = s1.dot(&ca).dot(&s1);
    let inner = (&inner + &inner.t()) * 0.5;
    let s2 = sqrtm_psd(&inner);
    let trace_term = trace(&ca) + trace(&cb) - 2.0 * trace(&s2);
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((mean_term + trace_term).max(0.0))
}

// ---------------------------------------------------------------------------
// Motion agreement

/// Velocity threshold below which a clip counts as static (px per frame).
const MOTION_FLOOR: f64 = 0.05;

/// Estimate the dominant motion as the least-squares drift of the centroid
/// of absolute frame differences. `None` means no usable motion signal.
pub fn dominant_motion(clip: &VideoClip) -> Option<(f64, f64)> {
    let (t, h, w, c) = clip.frames.dim();
    if t < 3 {
        return None;
    }
    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    for ti in 0..t - 1 {
        let mut mass = 0.0;
        let mut sx = 0.0;
        let mut sy = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mut d = 0.0;
                for ch in 0..c {
                    d += (clip.frames[[ti + 1, y, x, ch]] - clip.frames[[ti, y, x, ch]]).abs();
                }
                mass += d;
                sx += d * x as f64;
                sy += d * y as f64;
            }
        }
        if mass > 1e-9 {
            points.push((ti as f64, sx / mass, sy / mass));
        }
    }
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let tbar = points.iter().map(|p| p.0).sum::<f64>() / n;
    let xbar = points.iter().map(|p| p.1).sum::<f64>() / n;
    let ybar = points.iter().map(|p| p.2).sum::<f64>() / n;
    let mut stt = 0.0;
    let mut stx = 0.0;
    let mut sty = 0.0;
    for &(pt, px, py) in &points {
        stt += (pt - tbar) * (pt - tbar);
        stx += (pt - tbar) * (px - xbar);
        sty += (pt - tbar) * (py - ybar);
    }
    if stt < 1e-9 {
        return None;
    }
    Some((stx / stt, sty / stt))
}

/// Does the clip's dominant motion agree with a direction? Axis and sign
/// both have to match, and the motion has to clear the static floor.
pub fn motion_matches(clip: &VideoClip, dir: Direction) -> bool {
    let Some((vx, vy)) = dominant_motion(clip) else {
        return false;
    };
    let (ux, uy) = dir.unit();
    let (major, minor, u) = if vx.abs() >= vy.abs() {
        (vx, uy, ux)
    } else {
        (vy, ux, uy)
    };
    if minor != 0 {
        return false; // caption moves on the other axis
    }
    major.abs() >= MOTION_FLOOR && major.signum() == u as f64
}

/// Caption-level check: parse the caption's direction and compare it with
/// the clip's measured motion. Static clips never match a moving caption.
pub fn motion_fidelity(clip: &VideoClip, caption: &str) -> Result<bool> {
    let facts = parse_caption(caption)?;
    Ok(motion_matches(clip, facts.dir))
}

// ---------------------------------------------------------------------------
// Reconstruction metrics

/// Peak signal-to-noise ratio in dB for [0, 1] video; identical input gives
/// infinity.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    if a.frames.dim() != b.frames.dim() {
        return Err(Error::shape(format!(
            "clip shapes differ: {:?} vs {:?}",
            a.frames.dim(),
            b.frames.dim()
        )));
    }
    let mse = (&a.frames - &b.frames).mapv(|v| v * v).mean().unwrap_or(0.0);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Signal-to-noise ratio in dB of a reconstruction against its reference.
pub fn audio_snr(reference: &[f64], test: &[f64]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::shape(format!(
            "audio lengths differ: {} vs {}",
            reference.len(),
            test.len()
        )));
    }
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    let noise: f64 = reference
        .iter()
        .zip(test)
        .map(|(r, t)| (r - t) * (r - t))
        .sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    if signal == 0.0 {
        return Err(Error::data("reference audio is silent".to_string()));
    }
    Ok(10.0 * (signal / noise).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, SynthConfig};
    use ndarray::Array4;

    fn random_stats(dim: usize, n: usize, seed: u64, shift: f64) -> FrechetStats {
        let mut rng = seeded_rng(seed, "eval-test");
        let mut stats = FrechetStats::new(dim);
        for _ in 0..n {
            let x: Vec<f64> = (0..dim)
                .map(|i| {
                    let u1: f64 = rng.random::<f64>().max(1e-12);
                    let u2: f64 = rng.random();
                    shift
                        + (1.0 + 0.3 * i as f64)
                            * (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            stats.push(&x).unwrap();
        }
        stats
    }

    #[test]
    fn identical_distributions_have_zero_distance() {
        let a = random_stats(6, 80, 3, 0.0);
        let d = frechet_distance(&a, &a).unwrap();
        assert!(d.abs() < 1e-8, "self distance {d}");
    }

    #[test]
    fn unit_mean_shift_with_equal_covariance_is_one() {
        let mut cov = Array2::eye(5);
        cov[[0, 1]] = 0.2;
        cov[[1, 0]] = 0.2;
        cov[[2, 2]] = 2.5;
        let mean_a = vec![0.0; 5];
        let mut mean_b = vec![0.0; 5];
        mean_b[3] = 1.0;
        let a = FrechetStats::from_parts(100, mean_a, cov.clone()).unwrap();
        let b = FrechetStats::from_parts(100, mean_b, cov).unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-8, "distance {d}");
        let back = frechet_distance(&b, &a).unwrap();
        assert!((d - back).abs() < 1e-9, "asymmetry {d} vs {back}");
    }

    #[test]
    fn distance_grows_with_mean_separation() {
        let base = random_stats(4, 60, 5, 0.0);
        let mut prev = 0.0;
        for (i, shift) in [0.5, 1.0, 2.0].into_iter().enumerate() {
            let moved = random_stats(4, 60, 5, shift);
            let d = frechet_distance(&base, &moved).unwrap();
            assert!(d > prev, "shift {shift} gave {d}, not above {prev}");
            if i == 0 {
                assert!(d > 0.1);
            }
            prev = d;
        }
    }

    #[test]
    fn square_root_matches_an_eigendecomposition_oracle() {
        // Independent oracle: trace of (Ca Cb)^(1/2) via symmetric eigensolve.
        let a = random_stats(4, 50, 11, 0.0);
        let b = random_stats(4, 50, 13, 0.4);
        let ca = a.covariance().unwrap();
        let cb = b.covariance().unwrap();
        let na_ca = nalgebra::DMatrix::from_fn(4, 4, |i, j| ca[[i, j]]);
        let na_cb = nalgebra::DMatrix::from_fn(4, 4, |i, j| cb[[i, j]]);
        let eig_b = nalgebra::SymmetricEigen::new(na_cb.clone());
        let sqrt_b = &eig_b.eigenvectors
            * nalgebra::DMatrix::from_diagonal(&eig_b.eigenvalues.map(|v| v.max(0.0).sqrt()))
            * eig_b.eigenvectors.transpose();
        let inner = &sqrt_b * &na_ca * &sqrt_b;
        let inner = (&inner + &inner.transpose()) * 0.5;
        let eig_inner = nalgebra::SymmetricEigen::new(inner);
        let tr_sqrt: f64 = eig_inner.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
        let mean_term: f64 = a
            .mean()
            .iter()
            .zip(b.mean())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let oracle = mean_term + na_ca.trace() + na_cb.trace() - 2.0 * tr_sqrt;
        let d = frechet_distance(&a, &b).unwrap();
        assert!(
            (d - oracle).abs() < 1e-8,
            "iterative {d} vs eigen oracle {oracle}"
        );
    }

    #[test]
    fn merge_matches_single_pass_and_is_associative() {
        let dim = 5;
        let mut rng = seeded_rng(21, "merge");
        let samples: Vec<Vec<f64>> = (0..90)
            .map(|_| (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .collect();
        let mut whole = FrechetStats::new(dim);
        for s in &samples {
            whole.push(s).unwrap();
        }
        let mut parts: Vec<FrechetStats> = Vec::new();
        for chunk in samples.chunks(30) {
            let mut st = FrechetStats::new(dim);
            for s in chunk {
                st.push(s).unwrap();
            }
            parts.push(st);
        }
        let left = parts[0].merge(&parts[1]).unwrap().merge(&parts[2]).unwrap();
        let right = parts[0].merge(&parts[1].merge(&parts[2]).unwrap()).unwrap();
        let close = |a: &FrechetStats, b: &FrechetStats| {
            assert_eq!(a.count(), b.count());
            for (x, y) in a.mean().iter().zip(b.mean()) {
                assert!((x - y).abs() < 1e-10);
            }
            let (ca, cb) = (a.covariance().unwrap(), b.covariance().unwrap());
            for (x, y) in ca.iter().zip(cb.iter()) {
                assert!((x - y).abs() < 1e-10);
            }
        };
        close(&left, &whole);
        close(&right, &whole);
        close(&parts[1].merge(&parts[0]).unwrap(), &parts[0].merge(&parts[1]).unwrap());
    }

    #[test]
    fn reliability_flag_needs_count_at_least_dim() {
        let mut st = FrechetStats::new(4);
        for i in 0..3 {
            st.push(&[i as f64, 0.0, 1.0, 2.0]).unwrap();
        }
        assert!(!st.is_reliable());
        st.push(&[5.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(st.is_reliable());
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let a = random_stats(4, 30, 1, 0.0);
        let b = random_stats(5, 30, 2, 0.0);
        assert!(frechet_distance(&a, &b).is_err());
        assert!(a.merge(&b).is_err());
        let mut st = FrechetStats::new(3);
        assert!(st.push(&[1.0, 2.0]).is_err());
        assert!(FrechetStats::new(3).covariance().is_err());
    }

    #[test]
    fn features_are_deterministic_and_input_sensitive() {
        let cfg = SynthConfig::desk();
        let clips = make_dataset(&cfg, 2, 31).unwrap();
        let proj = FeatureProjector::new(9);
        let f0 = proj.features(&clips[0].video).unwrap();
        let f0_again = proj.features(&clips[0].video).unwrap();
        let f1 = proj.features(&clips[1].video).unwrap();
        assert_eq!(f0.len(), FEATURE_DIM);
        assert_eq!(f0, f0_again);
        assert!(f0.iter().zip(&f1).any(|(a, b)| (a - b).abs() > 1e-9));
        let other = FeatureProjector::new(10);
        let g0 = other.features(&clips[0].video).unwrap();
        assert!(f0.iter().zip(&g0).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn generated_clips_match_their_own_captions() {
        let cfg = SynthConfig::desk();
        let clips = make_dataset(&cfg, 200, 41).unwrap();
        let mut matched = 0;
        for clip in &clips {
            if motion_fidelity(&clip.video, &clip.caption).unwrap() {
                matched += 1;
            }
        }
        assert_eq!(matched, 200, "all rendered clips agree with their captions");
    }

    #[test]
    fn reversed_and_static_clips_do_not_match() {
        let cfg = SynthConfig::desk();
        let clips = make_dataset(&cfg, 20, 43).unwrap();
        for clip in &clips {
            let mut rev = clip.video.frames.clone();
            rev.invert_axis(ndarray::Axis(0));
            let reversed = VideoClip::new(rev, clip.video.fps).unwrap();
            assert!(
                !motion_fidelity(&reversed, &clip.caption).unwrap(),
                "reversed clip still matches '{}'",
                clip.caption
            );
        }
        let flat = VideoClip::new(Array4::from_elem((17, 32, 32, 3), 0.5), 8).unwrap();
        assert!(dominant_motion(&flat).is_none());
        assert!(!motion_fidelity(&flat, "a red square moves left slowly").unwrap());
    }

    #[test]
    fn reconstruction_metrics_behave() {
        let cfg = SynthConfig::desk();
        let clip = &make_dataset(&cfg, 1, 47).unwrap()[0];
        assert_eq!(psnr(&clip.video, &clip.video).unwrap(), f64::INFINITY);
        let mut noisy = clip.video.frames.clone();
        noisy.mapv_inplace(|v| (v + 0.1).min(1.0));
        let noisy = VideoClip::new(noisy, clip.video.fps).unwrap();
        let p = psnr(&clip.video, &noisy).unwrap();
        assert!(p > 10.0 && p < 30.0, "psnr {p}");
        assert_eq!(audio_snr(&clip.audio, &clip.audio).unwrap(), f64::INFINITY);
        let worse: Vec<f64> = clip.audio.iter().map(|v| v * 0.5).collect();
        let snr = audio_snr(&clip.audio, &worse).unwrap();
        assert!((snr - 6.02).abs() < 0.1, "snr {snr}");
    }
}
