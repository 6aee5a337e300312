//! Brownian increments and iterated Itô integrals on nested grids.
//!
//! Everything is drawn once on the finest grid of a [`GridSpec`] and the
//! coarser levels are built by summation, so every scheme and the reference
//! solution integrate against one underlying path.
//!
//! Draws come from ChaCha8 keyed by `(seed, sample, channel)`. Each finest
//! step consumes a fixed number of words, so the draws of step `n` always
//! sit at word offset `n * stride` of the stream and do not depend on how
//! many samples, threads, or grid levels are in play. Increments and Lévy
//! areas live on separate channels, so toggling area sampling or changing
//! the truncation leaves the increments untouched.
//!
//! Iterated integrals are stored as their antisymmetric part (the Lévy
//! area). The symmetric part comes from the increments:
//! `I[l][i] = ½ ΔW_l ΔW_i - ½ δ_li Δt + L[l][i]`, where `I[l][i]` is
//! `∫∫ dW_l(r) dW_i(s)` with `l` the inner and `i` the outer integrator.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_LEVY_TERMS: usize = 30;

const INCREMENT_CHANNEL: u64 = 0;
const AREA_CHANNEL: u64 = 1;
const MAGIC: &[u8; 5] = b"NBAT1";

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    t_final: f64,
    levels: Vec<usize>,
}

impl GridSpec {
    /// `levels` are step counts; each must divide the largest one.
    pub fn new(t_final: f64, levels: &[usize]) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(Error::InvalidInput(format!("final time must be positive, got {t_final}")));
        }
        if levels.is_empty() || levels.contains(&0) {
            return Err(Error::InvalidInput("grid levels must be non-empty and >= 1".into()));
        }
        let mut levels = levels.to_vec();
        levels.sort_unstable_by(|a, b| b.cmp(a));
        levels.dedup();
        let finest = levels[0];
        if let Some(bad) = levels.iter().find(|&&n| !finest.is_multiple_of(n)) {
            return Err(Error::InvalidInput(format!(
                "level with {bad} steps does not divide the finest level ({finest} steps)"
            )));
        }
        Ok(GridSpec { t_final, levels })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    /// Step counts, finest first.
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn finest(&self) -> usize {
        self.levels[0]
    }

    pub fn dt(&self, steps: usize) -> f64 {
        self.t_final / steps as f64
    }
}

/// One grid level of a [`NoiseBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLevel {
    steps: usize,
    dt: f64,
    m: usize,
    increments: Vec<f64>,
    areas: Option<Vec<f64>>,
}

impl NoiseLevel {
    /// Builds a level from raw data; `areas`, when given, holds one
    /// antisymmetric m×m block per step.
    pub fn from_parts(
        dt: f64,
        m: usize,
        increments: Vec<f64>,
        areas: Option<Vec<f64>>,
    ) -> Result<Self> {
        if m == 0 || !increments.len().is_multiple_of(m) {
            return Err(Error::InvalidInput("increment count is not a multiple of m".into()));
        }
        let steps = increments.len() / m;
        if let Some(a) = &areas {
            if a.len() != steps * m * m {
                return Err(Error::DimensionMismatch {
                    context: "Lévy areas",
                    expected: steps * m * m,
                    actual: a.len(),
                });
            }
        }
        Ok(NoiseLevel {
            steps,
            dt,
            m,
            increments,
            areas,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn has_areas(&self) -> bool {
        self.areas.is_some()
    }

    /// Flat `steps × m` increments.
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn increment(&self, n: usize) -> &[f64] {
        &self.increments[n * self.m..(n + 1) * self.m]
    }

    /// Lévy area `L[l][i]` of step `n`; zero when areas were not sampled.
    pub fn area(&self, n: usize, l: usize, i: usize) -> f64 {
        match &self.areas {
            Some(a) => a[(n * self.m + l) * self.m + i],
            None => 0.0,
        }
    }

    pub fn iterated(&self, n: usize, l: usize, i: usize) -> f64 {
        let dw = self.increment(n);
        if l == i {
            0.5 * (dw[i] * dw[i] - self.dt)
        } else {
            0.5 * dw[l] * dw[i] + self.area(n, l, i)
        }
    }

    /// Writes the m×m iterated-integral matrix of step `n` (row `l`, column `i`).
    pub fn iterated_into(&self, n: usize, out: &mut [f64]) {
        let m = self.m;
        debug_assert_eq!(out.len(), m * m);
        for l in 0..m {
            for i in 0..m {
                out[l * m + i] = self.iterated(n, l, i);
            }
        }
    }

    /// Cumulative path `W(t_k)` for `k = 0..=steps`, flattened `(steps+1) × m`.
    pub fn path(&self) -> Vec<f64> {
        let m = self.m;
        let mut w = vec![0.0; (self.steps + 1) * m];
        for n in 0..self.steps {
            for j in 0..m {
                w[(n + 1) * m + j] = w[n * m + j] + self.increments[n * m + j];
            }
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    seed: u64,
    sample: u64,
    m: usize,
    t_final: f64,
    levy_terms: Option<usize>,
    levels: Vec<NoiseLevel>,
}

impl NoiseBatch {
    /// Draws one sample path on the finest level of `grid` and aggregates it to
    /// every other level. `levy_terms = None` skips Lévy-area sampling.
    pub fn generate(
        seed: u64,
        sample: u64,
        m: usize,
        grid: &GridSpec,
        levy_terms: Option<usize>,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidInput("noise dimension must be >= 1".into()));
        }
        let fine_steps = grid.finest();
        let h = grid.dt(fine_steps);
        let increments = draw_increments(seed, sample, m, fine_steps, h);
        let areas = levy_terms.map(|k| draw_areas(seed, sample, m, fine_steps, h, k, &increments));
        let finest = NoiseLevel {
            steps: fine_steps,
            dt: h,
            m,
            increments,
            areas,
        };
        let mut levels = Vec::with_capacity(grid.levels().len());
        for &steps in &grid.levels()[1..] {
            levels.push(coarsen_level(&finest, fine_steps / steps, grid.dt(steps)));
        }
        levels.insert(0, finest);
        Ok(NoiseBatch {
            seed,
            sample,
            m,
            t_final: grid.t_final(),
            levy_terms,
            levels,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sample(&self) -> u64 {
        self.sample
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn levy_terms(&self) -> Option<usize> {
        self.levy_terms
    }

    pub fn levels(&self) -> &[NoiseLevel] {
        &self.levels
    }

    pub fn finest(&self) -> &NoiseLevel {
        &self.levels[0]
    }

    pub fn level(&self, steps: usize) -> Option<&NoiseLevel> {
        self.levels.iter().find(|l| l.steps == steps)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.m as u64).to_le_bytes())?;
        w.write_all(&(self.levels.len() as u64).to_le_bytes())?;
        let k = self.levy_terms.map_or(u64::MAX, |k| k as u64);
        w.write_all(&k.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.sample.to_le_bytes())?;
        w.write_all(&self.t_final.to_le_bytes())?;
        for level in &self.levels {
            w.write_all(&(level.steps as u64).to_le_bytes())?;
        }
        for level in &self.levels {
            for v in &level.increments {
                w.write_all(&v.to_le_bytes())?;
            }
            if let Some(a) = &level.areas {
                for v in a {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let m = read_u64(&mut r)? as usize;
        let n_levels = read_u64(&mut r)? as usize;
        let k = read_u64(&mut r)?;
        let levy_terms = (k != u64::MAX).then_some(k as usize);
        let seed = read_u64(&mut r)?;
        let sample = read_u64(&mut r)?;
        let t_final = f64::from_bits(read_u64(&mut r)?);
        if m == 0 || n_levels == 0 || n_levels > 64 {
            return Err(Error::Format(format!("implausible header m={m} levels={n_levels}")));
        }
        let mut steps = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            steps.push(read_u64(&mut r)? as usize);
        }
        let grid = GridSpec::new(t_final, &steps).map_err(|e| Error::Format(e.to_string()))?;
        if grid.levels() != steps.as_slice() {
            return Err(Error::Format("levels are not stored finest first".into()));
        }
        let mut levels = Vec::with_capacity(n_levels);
        for &s in &steps {
            let increments = read_f64s(&mut r, s * m)?;
            let areas = match levy_terms {
                Some(_) => Some(read_f64s(&mut r, s * m * m)?),
                None => None,
            };
            levels.push(NoiseLevel {
                steps: s,
                dt: grid.dt(s),
                m,
                increments,
                areas,
            });
        }
        Ok(NoiseBatch {
            seed,
            sample,
            m,
            t_final,
            levy_terms,
            levels,
        })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format(e.to_string()))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_u64(r).map(f64::from_bits)).collect()
}

/// Counter-addressed standard normals for one `(seed, sample, channel)` stream.
pub(crate) struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub(crate) fn new(seed: u64, sample: u64, channel: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sample.wrapping_mul(2).wrapping_add(channel));
        NormalStream { rng }
    }

    #[cfg(test)]
    /// Jumps to the first draw of `step` for a stream that uses `per_step` normals per step.
    pub(crate) fn seek(&mut self, step: usize, per_step: usize) {
        self.rng
            .set_word_pos(step as u128 * words_per_step(per_step) as u128);
    }

    /// Fills `out` with normals; consumes `words_per_step(out.len())` words.
    pub(crate) fn fill(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_mut(2);
        for pair in &mut chunks {
            let (z0, z1) = box_muller(self.rng.next_u64(), self.rng.next_u64());
            pair[0] = z0;
            if pair.len() > 1 {
                pair[1] = z1;
            }
        }
    }
}

#[cfg(test)]
fn words_per_step(normals: usize) -> usize {
    normals.div_ceil(2) * 4
}

fn box_muller(a: u64, b: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((a >> 11) + 1) as f64 * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (2.0 * PI * u2).sin_cos();
    (r * c, r * s)
}

fn draw_increments(seed: u64, sample: u64, m: usize, steps: usize, h: f64) -> Vec<f64> {
    let mut stream = NormalStream::new(seed, sample, INCREMENT_CHANNEL);
    let sqrt_h = h.sqrt();
    let mut out = vec![0.0; steps * m];
    for row in out.chunks_mut(m) {
        stream.fill(row);
        row.iter_mut().for_each(|z| *z *= sqrt_h);
    }
    out
}

/// `1/12 - (1/2π²) Σ_{r<=K} 1/r²`, the variance left in the truncated tail.
pub fn tail_variance(k: usize) -> f64 {
    let partial: f64 = (1..=k).map(|r| 1.0 / (r * r) as f64).sum();
    (1.0 / 12.0 - partial / (2.0 * PI * PI)).max(0.0)
}

fn area_normals_per_step(m: usize, k: usize) -> usize {
    2 * m * k + m + m * (m - 1) / 2
}

/// Truncated Fourier expansion of the Brownian bridge on each step. The
/// mean-term coefficient gets its truncated variance back through an extra
/// normal, and the pairwise area sum through another, so `E[L²] = h²/4`
/// for every `K`.
fn draw_areas(
    seed: u64,
    sample: u64,
    m: usize,
    steps: usize,
    h: f64,
    k: usize,
    increments: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; steps * m * m];
    if m < 2 {
        return out;
    }
    let mut stream = NormalStream::new(seed, sample, AREA_CHANNEL);
    let per_step = area_normals_per_step(m, k);
    let mut z = vec![0.0; per_step];
    let rho = tail_variance(k);
    let sqrt_h = h.sqrt();
    let a0_scale = (2.0 * h).sqrt() / PI;
    let tail_a0 = 2.0 * (h * rho).sqrt();
    let tail_pair = rho.sqrt();
    let mut a0 = vec![0.0; m];

    for n in 0..steps {
        stream.fill(&mut z);
        // layout: zeta[r][j], eta[r][j] for r < K, then mu[j], then nu per pair
        let (fourier, rest) = z.split_at(2 * m * k);
        let (mu, nu) = rest.split_at(m);
        for j in 0..m {
            let s: f64 = (0..k).map(|r| fourier[2 * m * r + j] / (r + 1) as f64).sum();
            a0[j] = -a0_scale * s - tail_a0 * mu[j];
        }
        let dw = &increments[n * m..(n + 1) * m];
        let block = &mut out[n * m * m..(n + 1) * m * m];
        let mut pair = 0;
        for l in 0..m {
            for i in l + 1..m {
                let mut fsum = 0.0;
                for r in 0..k {
                    let zeta = &fourier[2 * m * r..2 * m * r + m];
                    let eta = &fourier[2 * m * r + m..2 * m * (r + 1)];
                    fsum += (zeta[l] * eta[i] - eta[l] * zeta[i]) / (r + 1) as f64;
                }
                let area_coeff = fsum / (2.0 * PI) + tail_pair * nu[pair];
                let xi_l = dw[l] / sqrt_h;
                let xi_i = dw[i] / sqrt_h;
                let lv = -0.5 * sqrt_h * (a0[i] * xi_l - a0[l] * xi_i) + h * area_coeff;
                block[l * m + i] = lv;
                block[i * m + l] = -lv;
                pair += 1;
            }
        }
    }
    out
}

/// Sums each block of `factor` consecutive increments of a flat `steps × m` array.
pub fn coarsen_increments(fine: &[f64], m: usize, factor: usize) -> Result<Vec<f64>> {
    if m == 0 || factor == 0 || !fine.len().is_multiple_of(m * factor) {
        return Err(Error::InvalidInput(format!(
            "factor {factor} does not divide {} steps",
            if m == 0 { 0 } else { fine.len() / m }
        )));
    }
    let coarse_steps = fine.len() / (m * factor);
    let mut out = vec![0.0; coarse_steps * m];
    for (n, dst) in out.chunks_mut(m).enumerate() {
        for child in 0..factor {
            let src = &fine[(n * factor + child) * m..(n * factor + child + 1) * m];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(out)
}

/// Chain rule for iterated integrals over a block of consecutive steps:
/// `I[l][i] = Σ_k I_k[l][i] + Σ_k (W_l(t_k) - W_l(t_0)) ΔW_{i,k}`.
/// `increments` is `c × m`, `iterated` is `c × m × m`; returns one m×m block.
pub fn aggregate_iterated(increments: &[f64], iterated: &[f64], m: usize) -> Result<Vec<f64>> {
    if m == 0 || !increments.len().is_multiple_of(m) {
        return Err(Error::InvalidInput("increment block is not a multiple of m".into()));
    }
    let c = increments.len() / m;
    if iterated.len() != c * m * m {
        return Err(Error::DimensionMismatch {
            context: "iterated-integral block",
            expected: c * m * m,
            actual: iterated.len(),
        });
    }
    let mut out = vec![0.0; m * m];
    let mut running = vec![0.0; m];
    for k in 0..c {
        let dw = &increments[k * m..(k + 1) * m];
        let ik = &iterated[k * m * m..(k + 1) * m * m];
        for l in 0..m {
            for i in 0..m {
                out[l * m + i] += ik[l * m + i] + running[l] * dw[i];
            }
        }
        for (r, d) in running.iter_mut().zip(dw) {
            *r += d;
        }
    }
    Ok(out)
}

fn coarsen_level(fine: &NoiseLevel, factor: usize, dt: f64) -> NoiseLevel {
    let m = fine.m;
    let increments =
        coarsen_increments(&fine.increments, m, factor).expect("grid levels divide the finest");
    let areas = fine.areas.as_ref().map(|fa| {
        let coarse_steps = fine.steps / factor;
        let mut out = vec![0.0; coarse_steps * m * m];
        let mut running = vec![0.0; m];
        for n in 0..coarse_steps {
            let dst = &mut out[n * m * m..(n + 1) * m * m];
            running.iter_mut().for_each(|r| *r = 0.0);
            for child in 0..factor {
                let k = n * factor + child;
                let dw = &fine.increments[k * m..(k + 1) * m];
                let la = &fa[k * m * m..(k + 1) * m * m];
                for l in 0..m {
                    for i in l + 1..m {
                        let v = la[l * m + i] + 0.5 * (running[l] * dw[i] - running[i] * dw[l]);
                        dst[l * m + i] += v;
                        dst[i * m + l] -= v;
                    }
                }
                for (r, d) in running.iter_mut().zip(dw) {
                    *r += d;
                }
            }
        }
        out
    });
    NoiseLevel {
        steps: fine.steps / factor,
        dt,
        m,
        increments,
        areas,
    }
}
