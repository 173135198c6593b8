//! Synthetic data generation and state estimation: the two-mass nonlinear
//! spring chain, random stable LTI systems, sinusoidal and white-noise
//! excitation, central-difference velocity estimates.
//!
//! Every generator is a pure function of (parameters, seed): repeated calls
//! agree bitwise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spectral_radius;
use crate::models::Dataset;

/// Parameters of the two-mass chain with tangent-law springs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MsdParams {
    pub m1: f64,
    pub m2: f64,
    pub c1: f64,
    pub c2: f64,
    pub k1: f64,
    pub k2: f64,
    /// Spring law valid on (-limit, limit).
    pub limit: f64,
    pub sample_time: f64,
    /// Integrator step (fixed-step RK4).
    pub rk4_step: f64,
    pub noise_var: f64,
    /// Divide central differences by T_s instead of 2 T_s, reproducing the
    /// published estimate exactly (the default uses the consistent 2 T_s).
    pub paper_exact_divisor: bool,
}

impl Default for MsdParams {
    fn default() -> Self {
        MsdParams {
            m1: 0.5,
            m2: 0.1,
            c1: 0.01,
            c2: 0.1,
            k1: 2.0,
            k2: 1.0,
            limit: 1.25,
            sample_time: 0.1,
            rk4_step: 0.01,
            noise_var: 1e-4,
            paper_exact_divisor: false,
        }
    }
}

/// Multisine forcing: n_sines random sinusoids with uniform amplitude,
/// frequency (Hz) and phase draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InputSpec {
    pub n_sines: usize,
    pub amp_range: (f64, f64),
    pub freq_range_hz: (f64, f64),
    pub seed: u64,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec {
            n_sines: 20,
            amp_range: (0.01, 0.09),
            freq_range_hz: (0.02, 0.8),
            seed: 0,
        }
    }
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Tangent spring law k * tan(pi s / (2 * limit)), valid for |s| < limit.
pub fn spring_force(s: f64, k: f64, limit: f64) -> Result<f64> {
    if !(s.abs() < limit) {
        return Err(Error::Generator(format!(
            "spring displacement {s} outside (-{limit}, {limit})"
        )));
    }
    Ok(k * (std::f64::consts::PI * s / (2.0 * limit)).tan())
}

struct Multisine {
    amps: Vec<f64>,
    omegas: Vec<f64>,
    phases: Vec<f64>,
}

impl Multisine {
    fn draw(spec: &InputSpec, seed: u64) -> Multisine {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let unif = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        let mut amps = Vec::with_capacity(spec.n_sines);
        let mut omegas = Vec::with_capacity(spec.n_sines);
        let mut phases = Vec::with_capacity(spec.n_sines);
        for _ in 0..spec.n_sines {
            amps.push(unif(&mut rng, spec.amp_range));
            omegas.push(2.0 * std::f64::consts::PI * unif(&mut rng, spec.freq_range_hz));
            phases.push(2.0 * std::f64::consts::PI * rng.random::<f64>());
        }
        Multisine {
            amps,
            omegas,
            phases,
        }
    }

    fn at(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.amps.len() {
            acc += self.amps[i] * (self.omegas[i] * t + self.phases[i]).sin();
        }
        acc
    }
}

/// Chain dynamics: wall -- spring1/damper1 -- m1 -- spring2/damper2 -- m2,
/// with the force input applied to mass 1. State (s1, s2, v1, v2).
fn msd_deriv(p: &MsdParams, s: &[f64; 4], u: f64) -> Result<[f64; 4]> {
    let f1 = spring_force(s[0], p.k1, p.limit)?;
    let f2 = spring_force(s[1] - s[0], p.k2, p.limit)?;
    let dv_rel = s[3] - s[2];
    Ok([
        s[2],
        s[3],
        (-f1 - p.c1 * s[2] + f2 + p.c2 * dv_rel + u) / p.m1,
        (-f2 - p.c2 * dv_rel) / p.m2,
    ])
}

fn rk4_step(p: &MsdParams, s: &[f64; 4], input: &Multisine, t: f64, h: f64) -> Result<[f64; 4]> {
    let add = |a: &[f64; 4], b: &[f64; 4], w: f64| -> [f64; 4] {
        [a[0] + w * b[0], a[1] + w * b[1], a[2] + w * b[2], a[3] + w * b[3]]
    };
    let k1 = msd_deriv(p, s, input.at(t))?;
    let k2 = msd_deriv(p, &add(s, &k1, 0.5 * h), input.at(t + 0.5 * h))?;
    let k3 = msd_deriv(p, &add(s, &k2, 0.5 * h), input.at(t + 0.5 * h))?;
    let k4 = msd_deriv(p, &add(s, &k3, h), input.at(t + h))?;
    Ok([
        s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        s[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        s[3] + h / 6.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
    ])
}

/// Simulation products: the dataset (u = force, y = noisy s2, states from
/// central differences of the noisy displacements) plus the clean signals.
#[derive(Debug, Clone)]
pub struct MsdRecord {
    pub data: Dataset,
    pub clean_s1: DVector<f64>,
    pub clean_s2: DVector<f64>,
    /// Seed that actually produced the record (after re-seeding).
    pub seed_used: u64,
}

/// Integrate the chain with fixed-step RK4 from rest and sample at the output
/// rate. Runs whose spring arguments leave (-limit, limit) are rejected and
/// re-seeded deterministically.
pub fn simulate_msd(p: &MsdParams, spec: &InputSpec, t_len: usize, seed: u64) -> Result<MsdRecord> {
    for attempt in 0..50u64 {
        let seed_used = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9));
        match simulate_msd_once(p, spec, t_len, seed_used) {
            Ok(rec) => return Ok(rec),
            Err(Error::Generator(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generator(
        "all re-seeded runs left the spring range".into(),
    ))
}

fn simulate_msd_once(
    p: &MsdParams,
    spec: &InputSpec,
    t_len: usize,
    seed: u64,
) -> Result<MsdRecord> {
    if t_len < 3 {
        return Err(Error::InvalidInput("MSD generator needs T >= 3".into()));
    }
    let input = Multisine::draw(spec, seed);
    let steps_per_sample = (p.sample_time / p.rk4_step).round() as usize;
    debug_assert!(steps_per_sample >= 1);
    let mut state = [0.0f64; 4];
    let mut clean_s1 = DVector::zeros(t_len);
    let mut clean_s2 = DVector::zeros(t_len);
    let mut u = DMatrix::zeros(t_len, 1);
    for t in 0..t_len {
        let time = t as f64 * p.sample_time;
        clean_s1[t] = state[0];
        clean_s2[t] = state[1];
        u[(t, 0)] = input.at(time);
        if t + 1 < t_len {
            for k in 0..steps_per_sample {
                let tk = time + k as f64 * p.rk4_step;
                state = rk4_step(p, &state, &input, tk, p.rk4_step)?;
                if !state.iter().all(|v| v.is_finite()) {
                    return Err(Error::Generator("non-finite state".into()));
                }
            }
        }
    }
    // Measurement noise on both displacements.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66);
    let sd = p.noise_var.sqrt();
    let noisy_s1 =
        DVector::from_fn(t_len, |t, _| clean_s1[t] + sd * randn(&mut rng));
    let noisy_s2 = DVector::from_fn(t_len, |t, _| clean_s2[t] + sd * randn(&mut rng));
    let y = DMatrix::from_fn(t_len, 1, |t, _| noisy_s2[t]);
    let xs = central_diff_states(&noisy_s1, &noisy_s2, p.sample_time, p.paper_exact_divisor)?;
    let data = Dataset::new(u, y, Some(xs), p.sample_time)?;
    Ok(MsdRecord {
        data,
        clean_s1,
        clean_s2,
        seed_used: seed,
    })
}

/// State estimates [s1, s2, v1, v2] with velocities from central differences
/// of the (noisy) displacements; one-sided differences at the endpoints.
pub fn central_diff_states(
    s1: &DVector<f64>,
    s2: &DVector<f64>,
    sample_time: f64,
    paper_exact_divisor: bool,
) -> Result<DMatrix<f64>> {
    let t_len = s1.len();
    if t_len < 3 || s2.len() != t_len {
        return Err(Error::InvalidInput(
            "central differences need T >= 3 and equal-length signals".into(),
        ));
    }
    let div = if paper_exact_divisor {
        sample_time
    } else {
        2.0 * sample_time
    };
    let vel = |s: &DVector<f64>, t: usize| -> f64 {
        if t == 0 {
            (s[1] - s[0]) / (0.5 * div)
        } else if t + 1 == t_len {
            (s[t_len - 1] - s[t_len - 2]) / (0.5 * div)
        } else {
            (s[t + 1] - s[t - 1]) / div
        }
    };
    let mut xs = DMatrix::zeros(t_len, 4);
    for t in 0..t_len {
        xs[(t, 0)] = s1[t];
        xs[(t, 1)] = s2[t];
        xs[(t, 2)] = vel(s1, t);
        xs[(t, 3)] = vel(s2, t);
    }
    Ok(xs)
}

/// Explicit LTI system x+ = A x + B u, y = C x + D u.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LtiSystem {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn simulate(&self, u: &DMatrix<f64>, x0: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let t_len = u.nrows();
        let mut xs = DMatrix::zeros(t_len, self.a.nrows());
        let mut ys = DMatrix::zeros(t_len, self.c.nrows());
        let mut x = x0.clone();
        for t in 0..t_len {
            let ut = u.row(t).transpose();
            xs.row_mut(t).copy_from(&x.transpose());
            ys.row_mut(t)
                .copy_from(&(&self.c * &x + &self.d * &ut).transpose());
            x = &self.a * &x + &self.b * &ut;
        }
        (xs, ys)
    }
}

/// Random Schur-stable system: normal A rescaled to a spectral radius drawn
/// uniformly from [0.3, radius_bound]; B, C, D normal scaled by 1/sqrt(n_x).
/// Returns the system and an impulse-energy convergence flag.
pub fn gen_random_lti(
    n_x: usize,
    n_u: usize,
    n_y: usize,
    radius_bound: f64,
    seed: u64,
) -> Result<(LtiSystem, bool)> {
    if !(0.0 < radius_bound && radius_bound < 1.0) {
        return Err(Error::InvalidInput(
            "spectral radius bound must lie in (0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::from_fn(n_x, n_x, |_, _| randn(&mut rng));
    let target = 0.3 + (radius_bound - 0.3).max(0.0) * rng.random::<f64>();
    let sr = spectral_radius(&a);
    if sr > 0.0 {
        a *= target / sr;
    }
    let scale = 1.0 / (n_x as f64).sqrt();
    let b = DMatrix::from_fn(n_x, n_u, |_, _| scale * randn(&mut rng));
    let c = DMatrix::from_fn(n_y, n_x, |_, _| scale * randn(&mut rng));
    let d = DMatrix::from_fn(n_y, n_u, |_, _| scale * randn(&mut rng));
    let sys = LtiSystem { a, b, c, d };
    // Ratio test on impulse-response energy.
    let mut m = sys.c.clone();
    let mut energy_prev = (&m * &sys.b).norm_squared().max(1e-300);
    let mut converges = true;
    for _ in 0..50 {
        m *= &sys.a;
        let e = (&m * &sys.b).norm_squared();
        if e > energy_prev && e > 1e3 {
            converges = false;
            break;
        }
        energy_prev = e.max(1e-300);
    }
    Ok((sys, converges))
}

/// How surrogate states are attached to generated LTI data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatePolicy {
    /// True simulated states.
    Oracle,
    /// True states plus Gaussian noise at the same SNR as the output.
    NoisyOracle,
}

/// Simulate the system under unit white-noise input and corrupt the output
/// (and optionally the states) to the requested SNR. `snr_db = None` means
/// noiseless.
pub fn make_lti_dataset(
    sys: &LtiSystem,
    t_len: usize,
    snr_db: Option<f64>,
    policy: StatePolicy,
    seed: u64,
) -> Result<Dataset> {
    if t_len < 2 {
        return Err(Error::InvalidInput("dataset needs T >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_u = sys.b.ncols();
    let u = DMatrix::from_fn(t_len, n_u, |_, _| randn(&mut rng));
    let (xs, ys_clean) = sys.simulate(&u, &DVector::zeros(sys.n_x()));
    let noisy = |m: &DMatrix<f64>, rng: &mut ChaCha8Rng, snr_db: f64| -> DMatrix<f64> {
        let mut out = m.clone();
        for j in 0..m.ncols() {
            let power = m.column(j).norm_squared() / t_len as f64;
            let sd = (power / 10f64.powf(snr_db / 10.0)).sqrt();
            for i in 0..t_len {
                out[(i, j)] += sd * randn(rng);
            }
        }
        out
    };
    let y = match snr_db {
        Some(db) => noisy(&ys_clean, &mut rng, db),
        None => ys_clean.clone(),
    };
    let x = match (policy, snr_db) {
        (StatePolicy::Oracle, _) | (_, None) => xs,
        (StatePolicy::NoisyOracle, Some(db)) => noisy(&xs, &mut rng, db),
    };
    Dataset::new(u, y, Some(x), 1.0)
}

/// Empirical SNR in dB between a clean signal and its noisy measurement.
pub fn empirical_snr_db(clean: &DVector<f64>, noisy: &DVector<f64>) -> f64 {
    let p_signal = clean.norm_squared() / clean.len() as f64;
    let p_noise = (noisy - clean).norm_squared() / clean.len() as f64;
    10.0 * (p_signal / p_noise).log10()
}
