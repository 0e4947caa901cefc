//! Monte Carlo model of dual-sided heterodyne detection.
//!
//! Each shot yields a complex outcome per direction,
//! `S = √G (α + ν)`, where `α` is an exact sample of the signal Husimi
//! distribution (which already carries one vacuum unit of noise) and `ν` is
//! complex Gaussian amplifier noise with `E|ν|² = n_noise`. Because the
//! amplified field commutes with its adjoint, this decomposition is the exact
//! joint outcome law.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emission::QubitState;
use crate::error::{Error, Result};
use crate::fock::{TwoModeState, C64};

/// Shots per independently seeded RNG stream.
pub const SHARD_SIZE: usize = 1 << 14;
/// Refuse rejection samplers that would accept fewer proposals than this.
pub const MIN_ACCEPTANCE: f64 = 1e-4;
/// Safety inflation applied to the located supremum of Q / proposal.
pub const BOUND_INFLATION: f64 = 1.05;
/// Residual thermal occupation of the signal path for ground-state runs.
pub const DEFAULT_RESIDUAL_THERMAL: f64 = 0.006;

const MAGIC: &[u8; 4] = b"WQED";
const FORMAT_VERSION: u32 = 1;

/// Phase-insensitive amplifier chains on the two output lines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplifierChainParams {
    pub gain_l: f64,
    pub gain_r: f64,
    pub n_noise_l: f64,
    pub n_noise_r: f64,
}

impl AmplifierChainParams {
    pub fn new(gain_l: f64, gain_r: f64, n_noise_l: f64, n_noise_r: f64) -> Result<Self> {
        let p = Self {
            gain_l,
            gain_r,
            n_noise_l,
            n_noise_r,
        };
        p.validate()?;
        Ok(p)
    }

    /// Same gain and added noise on both sides.
    pub fn symmetric(gain: f64, n_noise: f64) -> Result<Self> {
        Self::new(gain, gain, n_noise, n_noise)
    }

    /// Chains specified by detection efficiency `η = 1/(1 + n_noise)`.
    pub fn from_efficiency(gain_l: f64, gain_r: f64, eta_l: f64, eta_r: f64) -> Result<Self> {
        for eta in [eta_l, eta_r] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::InvalidArgument(format!("efficiency {eta} outside (0, 1]")));
            }
        }
        Self::new(gain_l, gain_r, 1.0 / eta_l - 1.0, 1.0 / eta_r - 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        // G = 1 is the noiseless-amplifier limit and is allowed.
        for g in [self.gain_l, self.gain_r] {
            if !(g.is_finite() && g >= 1.0) {
                return Err(Error::InvalidArgument(format!("gain {g} must be finite and ≥ 1")));
            }
        }
        for n in [self.n_noise_l, self.n_noise_r] {
            if !(n.is_finite() && n >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "added noise {n} must be finite and ≥ 0"
                )));
            }
        }
        Ok(())
    }

    pub fn efficiency_l(&self) -> f64 {
        1.0 / (1.0 + self.n_noise_l)
    }

    pub fn efficiency_r(&self) -> f64 {
        1.0 / (1.0 + self.n_noise_r)
    }

    pub fn gains(&self) -> [f64; 2] {
        [self.gain_l, self.gain_r]
    }

    pub fn noises(&self) -> [f64; 2] {
        [self.n_noise_l, self.n_noise_r]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterodyneRecord {
    pub s_l: C64,
    pub s_r: C64,
    pub shot_index: u64,
}

/// What the emitters were prepared in for a batch of shots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrepLabel {
    Signal,
    Ground,
    Calibration,
}

impl PrepLabel {
    pub fn as_u8(self) -> u8 {
        match self {
            PrepLabel::Signal => 0,
            PrepLabel::Ground => 1,
            PrepLabel::Calibration => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(PrepLabel::Signal),
            1 => Ok(PrepLabel::Ground),
            2 => Ok(PrepLabel::Calibration),
            other => Err(Error::Format(format!("unknown preparation label {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PrepLabel::Signal => "signal",
            PrepLabel::Ground => "ground",
            PrepLabel::Calibration => "calibration",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordBatch {
    pub records: Vec<HeterodyneRecord>,
    pub prep_label: PrepLabel,
    pub seed: u64,
    pub params: AmplifierChainParams,
}

impl RecordBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Outcomes divided by `√G`, i.e. referred back to the amplifier input.
    pub fn normalized(&self) -> Vec<(C64, C64)> {
        let (gl, gr) = (self.params.gain_l.sqrt(), self.params.gain_r.sqrt());
        self.records.iter().map(|r| (r.s_l / gl, r.s_r / gr)).collect()
    }

    pub fn require_label(&self, expected: PrepLabel) -> Result<()> {
        if self.prep_label != expected {
            return Err(Error::WrongPrepLabel {
                expected: expected.name().into(),
                got: self.prep_label.name().into(),
            });
        }
        Ok(())
    }

    /// Little-endian binary layout: magic, version, shot count, seed, label,
    /// chain parameters, then four f64 per shot.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&[self.prep_label.as_u8()])?;
        for v in [
            self.params.gain_l,
            self.params.gain_r,
            self.params.n_noise_l,
            self.params.n_noise_r,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.records.len() * 32);
        for r in &self.records {
            for v in [r.s_l.re, r.s_l.im, r.s_r.re, r.s_r.im] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut rd: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        rd.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut rd)?);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n_shots = u64::from_le_bytes(read_array(&mut rd)?) as usize;
        let seed = u64::from_le_bytes(read_array(&mut rd)?);
        let [label] = read_array::<1, _>(&mut rd)?;
        let mut p = [0f64; 4];
        for v in &mut p {
            *v = f64::from_le_bytes(read_array(&mut rd)?);
        }
        let params = AmplifierChainParams::new(p[0], p[1], p[2], p[3])?;
        let mut data = Vec::new();
        rd.read_to_end(&mut data)?;
        if data.len() != n_shots * 32 {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                n_shots * 32,
                data.len()
            )));
        }
        let records = data
            .chunks_exact(32)
            .enumerate()
            .map(|(i, chunk)| {
                let f = |k: usize| f64::from_le_bytes(chunk[8 * k..8 * k + 8].try_into().unwrap());
                HeterodyneRecord {
                    s_l: C64::new(f(0), f(1)),
                    s_r: C64::new(f(2), f(3)),
                    shot_index: i as u64,
                }
            })
            .collect();
        Ok(Self {
            records,
            prep_label: PrepLabel::from_u8(label)?,
            seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_binary(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_binary(std::io::BufReader::new(file))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("shot,re_s_l,im_s_l,re_s_r,im_s_r\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.shot_index, r.s_l.re, r.s_l.im, r.s_r.re, r.s_r.im
            ));
        }
        out
    }
}

fn read_array<const N: usize, R: Read>(rd: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    rd.read_exact(&mut buf)?;
    Ok(buf)
}

/// Exact rejection sampler for the two-mode Husimi distribution
/// `Q(α_L, α_R) = ⟨α_L α_R|ρ|α_L α_R⟩ / π²`.
///
/// Proposal: independent circular complex Gaussians with variance
/// `cutoff + 1` per mode.
#[derive(Debug, Clone)]
pub struct HusimiSampler {
    levels: usize,
    /// `√λ_k ψ_k` for the non-negligible eigenpairs of ρ.
    components: Vec<DVector<C64>>,
    /// `1/√n!` for n < levels.
    inv_sqrt_fact: Vec<f64>,
    variance: f64,
    bound: f64,
}

impl HusimiSampler {
    pub fn new(state: &TwoModeState) -> Result<Self> {
        let cutoff = state.space().cutoff();
        if cutoff < 2 {
            return Err(Error::CutoffTooSmall {
                cutoff,
                occupied: 0,
                power: 2,
            });
        }
        let levels = cutoff + 1;
        let eig = state.rho().matrix().clone().symmetric_eigen();
        let components = eig
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 1e-14)
            .map(|(k, &l)| eig.eigenvectors.column(k).into_owned() * C64::new(l.sqrt(), 0.0))
            .collect();
        let mut inv_sqrt_fact = Vec::with_capacity(levels);
        let mut fact = 1.0f64;
        for n in 0..levels {
            if n > 0 {
                fact *= n as f64;
            }
            inv_sqrt_fact.push(1.0 / fact.sqrt());
        }
        let mut sampler = Self {
            levels,
            components,
            inv_sqrt_fact,
            variance: levels as f64,
            bound: 0.0,
        };
        sampler.bound = BOUND_INFLATION * sampler.locate_supremum()?;
        let acceptance = 1.0 / sampler.bound;
        if acceptance < MIN_ACCEPTANCE {
            return Err(Error::AcceptanceTooLow(acceptance));
        }
        Ok(sampler)
    }

    /// `π² Q(α)`.
    pub fn husimi_scaled(&self, a_l: C64, a_r: C64) -> f64 {
        let powers = |a: C64| {
            let ac = a.conj();
            let mut v = Vec::with_capacity(self.levels);
            let mut p = C64::new(1.0, 0.0);
            for n in 0..self.levels {
                v.push(p * self.inv_sqrt_fact[n]);
                p *= ac;
            }
            v
        };
        let (ul, ur) = (powers(a_l), powers(a_r));
        let mut total = 0.0;
        for psi in &self.components {
            let mut amp = C64::new(0.0, 0.0);
            for (nl, u) in ul.iter().enumerate() {
                let row = &psi.as_slice()[nl * self.levels..(nl + 1) * self.levels];
                let mut inner = C64::new(0.0, 0.0);
                for (x, v) in row.iter().zip(&ur) {
                    inner += x * v;
                }
                amp += u * inner;
            }
            total += amp.norm_sqr();
        }
        total * (-(a_l.norm_sqr() + a_r.norm_sqr())).exp()
    }

    /// Q / proposal density.
    fn ratio(&self, a_l: C64, a_r: C64) -> f64 {
        let s = self.variance;
        s * s * self.husimi_scaled(a_l, a_r) * ((a_l.norm_sqr() + a_r.norm_sqr()) / s).exp()
    }

    fn ratio_at(&self, x: &[f64; 4]) -> f64 {
        self.ratio(C64::new(x[0], x[1]), C64::new(x[2], x[3]))
    }

    /// Coarse 4D grid scan refined by coordinate ascent from the best points.
    fn locate_supremum(&self) -> Result<f64> {
        const N: usize = 11;
        let extent = (self.variance).sqrt() + 1.5;
        let axis: Vec<f64> = (0..N)
            .map(|i| -extent + 2.0 * extent * i as f64 / (N - 1) as f64)
            .collect();
        let mut scored: Vec<(f64, [f64; 4])> = Vec::with_capacity(N.pow(4));
        for &a in &axis {
            for &b in &axis {
                for &c in &axis {
                    for &d in &axis {
                        let x = [a, b, c, d];
                        let v = self.ratio_at(&x);
                        if !v.is_finite() {
                            return Err(Error::BoundSearch(format!("non-finite Q at {x:?}")));
                        }
                        scored.push((v, x));
                    }
                }
            }
        }
        scored.sort_by(|p, q| q.0.total_cmp(&p.0));
        let mut best = scored[0].0;
        let step0 = 2.0 * extent / (N - 1) as f64;
        for &(v0, x0) in scored.iter().take(8) {
            let (mut v, mut x, mut step) = (v0, x0, step0);
            while step > 1e-6 {
                let mut improved = false;
                for k in 0..4 {
                    for dir in [-1.0, 1.0] {
                        let mut y = x;
                        y[k] += dir * step;
                        let vy = self.ratio_at(&y);
                        if !vy.is_finite() {
                            return Err(Error::BoundSearch(format!("non-finite Q at {y:?}")));
                        }
                        if vy > v {
                            v = vy;
                            x = y;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    step *= 0.5;
                }
            }
            best = best.max(v);
        }
        if !(best > 0.0) {
            return Err(Error::BoundSearch("supremum is not positive".into()));
        }
        Ok(best)
    }

    /// Expected fraction of accepted proposals.
    pub fn acceptance_rate(&self) -> f64 {
        1.0 / self.bound
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    fn proposal<R: Rng + ?Sized>(&self, rng: &mut R) -> C64 {
        let sd = (self.variance / 2.0).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(sd * re, sd * im)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (C64, C64) {
        loop {
            let a_l = self.proposal(rng);
            let a_r = self.proposal(rng);
            let u: f64 = rng.random();
            if u * self.bound < self.ratio(a_l, a_r) {
                return (a_l, a_r);
            }
        }
    }
}

/// One exact draw from the Husimi distribution of `state`.
pub fn sample_husimi<R: Rng + ?Sized>(state: &TwoModeState, rng: &mut R) -> Result<(C64, C64)> {
    Ok(HusimiSampler::new(state)?.sample(rng))
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let sd = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(sd * re, sd * im)
}

/// RNG for one shard: the shard index selects an independent ChaCha stream.
pub fn shard_rng(seed: u64, shard: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(shard);
    rng
}

/// Simulate `n_shots` heterodyne records. The output depends only on the
/// arguments, not on the thread count.
pub fn sample_records(
    state: &TwoModeState,
    params: &AmplifierChainParams,
    n_shots: usize,
    seed: u64,
    label: PrepLabel,
) -> Result<RecordBatch> {
    if n_shots == 0 {
        return Err(Error::EmptyBatch);
    }
    params.validate()?;
    let sampler = HusimiSampler::new(state)?;
    let (gl, gr) = (params.gain_l.sqrt(), params.gain_r.sqrt());
    let n_shards = n_shots.div_ceil(SHARD_SIZE);
    let shards: Vec<Vec<HeterodyneRecord>> = (0..n_shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = shard_rng(seed, shard as u64);
            let start = shard * SHARD_SIZE;
            let end = (start + SHARD_SIZE).min(n_shots);
            (start..end)
                .map(|i| {
                    let (a_l, a_r) = sampler.sample(&mut rng);
                    let nu_l = complex_gaussian(&mut rng, params.n_noise_l);
                    let nu_r = complex_gaussian(&mut rng, params.n_noise_r);
                    HeterodyneRecord {
                        s_l: (a_l + nu_l) * gl,
                        s_r: (a_r + nu_r) * gr,
                        shot_index: i as u64,
                    }
                })
                .collect()
        })
        .collect();
    Ok(RecordBatch {
        records: shards.into_iter().flatten().collect(),
        prep_label: label,
        seed,
        params: *params,
    })
}

/// Signal-path state for ground-state (noise reference) runs: vacuum with
/// a residual thermal occupation per mode.
pub fn ground_reference_state(cutoff: usize, n_th: f64) -> Result<TwoModeState> {
    TwoModeState::thermal(cutoff, n_th)
}

/// Parameters of the averaged single-emitter voltage trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeTraceParams {
    /// Emitter decay rate γ (rad/s).
    pub gamma: f64,
    /// Downconverted carrier frequency (Hz).
    pub f_d: f64,
    /// Per-shot, per-sample white-noise standard deviation, in the units of
    /// the emitted amplitude `√γ`.
    pub noise_std: f64,
}

impl TimeTraceParams {
    pub fn new(gamma: f64, f_d: f64, noise_std: f64) -> Result<Self> {
        if !(gamma > 0.0 && f_d > 0.0 && noise_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "time trace needs γ > 0, f_d > 0 and non-negative noise".into(),
            ));
        }
        Ok(Self {
            gamma,
            f_d,
            noise_std,
        })
    }
}

/// Coherent (`|⟨σ₋⟩|`) and incoherent parts of the emitted amplitude, and the
/// phase fixed by the preparation.
fn emission_amplitudes(prep: &QubitState) -> (f64, f64, f64) {
    let (alpha, beta) = prep.amplitudes();
    let coherent = alpha.conj() * beta;
    let incoherent = (beta.norm_sqr() - coherent.norm_sqr()).max(0.0).sqrt();
    (coherent.norm(), incoherent, coherent.arg())
}

/// `n_avg`-shot average of the demodulated voltage of a single emitter.
///
/// Per shot the voltage is `√γ e^{-γt/2} [|αβ| cos(2π f_d t + φ_prep)
/// + √(|β|² - |αβ|²) cos(2π f_d t + φ_shot)] + noise`, with `φ_shot` uniform:
/// only the part coherent with the vacuum survives averaging.
pub fn synth_time_trace<R: Rng + ?Sized>(
    prep: &QubitState,
    params: &TimeTraceParams,
    t_grid: &[f64],
    n_avg: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    prep.validate()?;
    if n_avg == 0 {
        return Err(Error::EmptyBatch);
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("time grid must be increasing".into()));
    }
    let (coh, inc, phase) = emission_amplitudes(prep);
    let omega_d = 2.0 * PI * params.f_d;
    let env: Vec<f64> = t_grid
        .iter()
        .map(|t| params.gamma.sqrt() * (-0.5 * params.gamma * t).exp())
        .collect();
    let noise_scale = params.noise_std * params.gamma.sqrt();
    let mut sum = vec![0.0; t_grid.len()];
    for _ in 0..n_avg {
        let phi: f64 = 2.0 * PI * rng.random::<f64>();
        for (k, t) in t_grid.iter().enumerate() {
            let wt = omega_d * t;
            let noise: f64 = rng.sample(StandardNormal);
            sum[k] += env[k] * (coh * (wt + phase).cos() + inc * (wt + phi).cos())
                + noise_scale * noise;
        }
    }
    Ok(sum.into_iter().map(|s| s / n_avg as f64).collect())
}

/// Least-squares fit of `e^{-γt/2}(A cos ω_d t + B sin ω_d t)` to a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub gamma: f64,
    /// `√(A² + B²)`, the envelope amplitude at t = 0.
    pub amplitude: f64,
    pub residual_rms: f64,
}

/// Fit the decay rate of an averaged trace. The amplitudes are linear
/// parameters solved exactly for each trial γ; γ itself is located by a
/// logarithmic scan over `gamma_range` followed by golden-section refinement.
pub fn fit_envelope_decay(
    t_grid: &[f64],
    trace: &[f64],
    f_d: f64,
    gamma_range: (f64, f64),
) -> Result<EnvelopeFit> {
    if t_grid.len() != trace.len() || t_grid.len() < 4 {
        return Err(Error::InvalidArgument("trace and grid must match and have ≥ 4 points".into()));
    }
    let (lo, hi) = gamma_range;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidArgument("invalid γ search range".into()));
    }
    let omega_d = 2.0 * PI * f_d;
    let solve = |gamma: f64| -> (f64, f64, f64) {
        let (mut scc, mut sss, mut scs, mut syc, mut sys, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (t, y) in t_grid.iter().zip(trace) {
            let e = (-0.5 * gamma * t).exp();
            let (cb, sb) = (e * (omega_d * t).cos(), e * (omega_d * t).sin());
            scc += cb * cb;
            sss += sb * sb;
            scs += cb * sb;
            syc += y * cb;
            sys += y * sb;
            syy += y * y;
        }
        let det = scc * sss - scs * scs;
        if det.abs() < 1e-300 {
            return (0.0, 0.0, syy);
        }
        let a = (syc * sss - sys * scs) / det;
        let b = (sys * scc - syc * scs) / det;
        let sse = syy - a * syc - b * sys;
        (a, b, sse)
    };
    let (llo, lhi) = (lo.ln(), hi.ln());
    const SCAN: usize = 200;
    let mut best = (f64::INFINITY, llo);
    for i in 0..=SCAN {
        let lg = llo + (lhi - llo) * i as f64 / SCAN as f64;
        let sse = solve(lg.exp()).2;
        if sse < best.0 {
            best = (sse, lg);
        }
    }
    let width = (lhi - llo) / SCAN as f64;
    let (mut a, mut b) = ((best.1 - width).max(llo), (best.1 + width).min(lhi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..100 {
        if solve(c.exp()).2 < solve(d.exp()).2 {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    let gamma = (0.5 * (a + b)).exp();
    let (ca, cb, sse) = solve(gamma);
    Ok(EnvelopeFit {
        gamma,
        amplitude: (ca * ca + cb * cb).sqrt(),
        residual_rms: (sse.max(0.0) / trace.len() as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emission::{emitted_state, EmitterConfig, QubitPreparation};
    use crate::fock::{expect_moment, FockSpace, Powers};
    use approx::assert_abs_diff_eq;

    fn noon() -> TwoModeState {
        let cfg = EmitterConfig::noon_device();
        emitted_state(&cfg, &QubitPreparation::all_excited(2), &[0, 1], 3).unwrap()
    }

    fn draws(state: &TwoModeState, n: usize, seed: u64) -> Vec<(C64, C64)> {
        let params = AmplifierChainParams::symmetric(1.0, 0.0).unwrap();
        sample_records(state, &params, n, seed, PrepLabel::Signal)
            .unwrap()
            .normalized()
    }

    #[test]
    fn vacuum_husimi_has_unit_antinormal_variance() {
        let vac = TwoModeState::vacuum(3).unwrap();
        let d = draws(&vac, 1_000_000, 1);
        let el: f64 = d.iter().map(|(l, _)| l.norm_sqr()).sum::<f64>() / d.len() as f64;
        let er: f64 = d.iter().map(|(_, r)| r.norm_sqr()).sum::<f64>() / d.len() as f64;
        assert_abs_diff_eq!(el, 1.0, epsilon = 0.01);
        assert_abs_diff_eq!(er, 1.0, epsilon = 0.01);
    }

    #[test]
    fn single_photon_husimi_moments() {
        let space = FockSpace::two_mode(3).unwrap();
        let state = TwoModeState::pure(space, &space.ket(&[1, 0]).unwrap()).unwrap();
        let d = draws(&state, 1_000_000, 2);
        let el: f64 = d.iter().map(|(l, _)| l.norm_sqr()).sum::<f64>() / d.len() as f64;
        let er: f64 = d.iter().map(|(_, r)| r.norm_sqr()).sum::<f64>() / d.len() as f64;
        assert_abs_diff_eq!(el, 2.0, epsilon = 0.02);
        assert_abs_diff_eq!(er, 1.0, epsilon = 0.02);
    }

    #[test]
    fn noon_husimi_cross_moment() {
        let state = noon();
        // the oracle needs photon-number headroom above the requested powers
        let oracle = expect_moment(&state.embed(4).unwrap(), Powers::new(0, 2, 2, 0)).unwrap();
        let d = draws(&state, 1_000_000, 3);
        let m: C64 = d.iter().map(|(l, r)| l * l * r.conj() * r.conj()).sum::<C64>() / d.len() as f64;
        assert_abs_diff_eq!(oracle.re, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.re, oracle.re, epsilon = 0.05);
        assert_abs_diff_eq!(m.im, oracle.im, epsilon = 0.05);
    }

    #[test]
    fn amplified_vacuum_noise_level() {
        let vac = TwoModeState::vacuum(3).unwrap();
        let params = AmplifierChainParams::symmetric(2.5e3, 8.615).unwrap();
        let batch = sample_records(&vac, &params, 1_000_000, 4, PrepLabel::Ground).unwrap();
        let d = batch.normalized();
        let e: f64 = d.iter().map(|(l, _)| l.norm_sqr()).sum::<f64>() / d.len() as f64;
        assert!((e / 9.615 - 1.0).abs() < 5e-3, "{e}");
        // left/right noise independence
        let cross: C64 = d.iter().map(|(l, r)| l * r.conj()).sum::<C64>() / d.len() as f64;
        let sigma = 9.615 / (d.len() as f64).sqrt();
        assert!(cross.norm() < 3.0 * sigma * 2f64.sqrt(), "{cross}");
    }

    #[test]
    fn vacuum_without_noise_is_unit_gaussian() {
        let vac = TwoModeState::vacuum(2).unwrap();
        let params = AmplifierChainParams::symmetric(1.0, 0.0).unwrap();
        let batch = sample_records(&vac, &params, 200_000, 5, PrepLabel::Ground).unwrap();
        let n = batch.len() as f64;
        let mean: C64 = batch.records.iter().map(|r| r.s_l).sum::<C64>() / n;
        let var_re: f64 = batch.records.iter().map(|r| r.s_l.re * r.s_l.re).sum::<f64>() / n;
        let var_im: f64 = batch.records.iter().map(|r| r.s_l.im * r.s_l.im).sum::<f64>() / n;
        assert!(mean.norm() < 0.01);
        assert_abs_diff_eq!(var_re, 0.5, epsilon = 0.01);
        assert_abs_diff_eq!(var_im, 0.5, epsilon = 0.01);
    }

    #[test]
    fn sampling_is_deterministic_and_thread_independent() {
        let state = noon();
        let params = AmplifierChainParams::symmetric(1e4, 1.0).unwrap();
        let a = sample_records(&state, &params, 40_000, 77, PrepLabel::Signal).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool
            .install(|| sample_records(&state, &params, 40_000, 77, PrepLabel::Signal))
            .unwrap();
        assert_eq!(a, b);
        let c = sample_records(&state, &params, 40_000, 78, PrepLabel::Signal).unwrap();
        assert_ne!(a.records[0], c.records[0]);
    }

    #[test]
    fn standard_error_scales_as_inverse_root_n() {
        let state = noon();
        let params = AmplifierChainParams::symmetric(1.0, 1.0).unwrap();
        let big = sample_records(&state, &params, 1_000_000, 9, PrepLabel::Signal)
            .unwrap()
            .normalized();
        // standard error of the mean of |S_L|² from the sample spread
        let stderr = |xs: &[(C64, C64)]| {
            let v: Vec<f64> = xs.iter().map(|(l, _)| l.norm_sqr()).collect();
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        };
        let e4 = stderr(&big[..10_000]);
        let e5 = stderr(&big[..100_000]);
        let e6 = stderr(&big);
        for ratio in [e4 / e5, e5 / e6] {
            let scaled = ratio / 10f64.sqrt();
            assert!(scaled > 1.0 / 1.5 && scaled < 1.5, "{ratio}");
        }
    }

    #[test]
    fn binary_round_trip_and_format_checks() {
        let state = noon();
        let params = AmplifierChainParams::new(1e4, 2e4, 1.0, 0.5).unwrap();
        let batch = sample_records(&state, &params, 100, 11, PrepLabel::Calibration).unwrap();
        let mut buf = Vec::new();
        batch.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"WQED");
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 1 + 32 + 100 * 32);
        let back = RecordBatch::read_binary(&buf[..]).unwrap();
        assert_eq!(back, batch);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(RecordBatch::read_binary(&bad[..]), Err(Error::Format(_))));
        assert!(RecordBatch::read_binary(&buf[..buf.len() - 1]).is_err());
        let csv = batch.to_csv();
        assert_eq!(csv.lines().count(), 101);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(AmplifierChainParams::symmetric(0.5, 1.0).is_err());
        assert!(AmplifierChainParams::symmetric(10.0, -1.0).is_err());
        assert!(AmplifierChainParams::from_efficiency(10.0, 10.0, 0.0, 0.5).is_err());
        let p = AmplifierChainParams::from_efficiency(10.0, 10.0, 0.104, 0.121).unwrap();
        assert_abs_diff_eq!(p.efficiency_l(), 0.104, epsilon = 1e-12);
        let vac = TwoModeState::vacuum(3).unwrap();
        let ok = AmplifierChainParams::symmetric(1.0, 0.0).unwrap();
        assert!(matches!(
            sample_records(&vac, &ok, 0, 1, PrepLabel::Ground),
            Err(Error::EmptyBatch)
        ));
        let small = TwoModeState::vacuum(1).unwrap();
        assert!(HusimiSampler::new(&small).is_err());
    }

    #[test]
    fn bound_dominates_ratio() {
        let state = noon();
        let s = HusimiSampler::new(&state).unwrap();
        assert!(s.acceptance_rate() > MIN_ACCEPTANCE);
        let mut rng = shard_rng(5, 0);
        for _ in 0..20_000 {
            let a = s.proposal(&mut rng);
            let b = s.proposal(&mut rng);
            assert!(s.ratio(a, b) <= s.bound());
        }
    }

    fn trace_grid() -> Vec<f64> {
        (0..2000).map(|k| k as f64 * 1e-9).collect()
    }

    #[test]
    fn superposition_trace_recovers_decay_rate() {
        let gamma = 2.0 * PI * 0.53e6;
        let params = TimeTraceParams::new(gamma, 40e6, 1.0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let prep = QubitState::superposition(C64::new(h, 0.0), C64::new(h, 0.0)).unwrap();
        let t = trace_grid();
        let mut rng = shard_rng(21, 0);
        let v = synth_time_trace(&prep, &params, &t, 10_000, &mut rng).unwrap();
        let fit = fit_envelope_decay(&t, &v, 40e6, (gamma / 20.0, gamma * 20.0)).unwrap();
        assert!((fit.gamma / gamma - 1.0).abs() < 0.05, "{}", fit.gamma / gamma);
        assert!((fit.amplitude / (0.5 * gamma.sqrt()) - 1.0).abs() < 0.05);
    }

    #[test]
    fn excited_trace_averages_to_zero() {
        let gamma = 2.0 * PI * 0.53e6;
        let params = TimeTraceParams::new(gamma, 40e6, 1.0).unwrap();
        let t = trace_grid();
        let n_avg = 10_000;
        let mut rng = shard_rng(22, 0);
        let v = synth_time_trace(&QubitState::Excited, &params, &t, n_avg, &mut rng).unwrap();
        // per-point standard error of the average: white noise plus the
        // random-phase emission, whose variance is γ e^{-γt}/2
        let z: Vec<f64> = t
            .iter()
            .zip(&v)
            .map(|(t, x)| {
                let var = gamma * (1.0 + 0.5 * (-gamma * t).exp());
                x / (var / n_avg as f64).sqrt()
            })
            .collect();
        let rms = (z.iter().map(|x| x * x).sum::<f64>() / z.len() as f64).sqrt();
        assert!(rms < 1.1 && rms > 0.9, "{rms}");
        let beyond = z.iter().filter(|x| x.abs() > 3.0).count();
        assert!(beyond < z.len() / 100, "{beyond}");
        let fit = fit_envelope_decay(&t, &v, 40e6, (gamma / 20.0, gamma * 20.0)).unwrap();
        assert!(fit.amplitude < 0.05 * gamma.sqrt());
    }

    #[test]
    fn ground_trace_is_pure_noise() {
        let gamma = 2.0 * PI * 0.53e6;
        let silent = TimeTraceParams::new(gamma, 40e6, 0.0).unwrap();
        let t = trace_grid();
        let mut rng = shard_rng(23, 0);
        let v = synth_time_trace(&QubitState::Ground, &silent, &t, 10, &mut rng).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }
}
