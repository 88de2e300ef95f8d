//! Brownian driving paths from a counter-based generator.
//!
//! Each increment is produced from (seed, increment index) alone, with no
//! sequential generator state. Consequences the rest of the crate relies
//! on: trajectory i of an ensemble regenerates identically no matter which
//! worker draws it or in what order, and refining the time grid only
//! appends finer increments instead of reshuffling the stream.

/// splitmix64 finalizer: a well-tested 64-bit mixer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const STREAM_STEP: u64 = 0x9e3779b97f4a7c15;

/// Uniform draw in (0, 1] for counter `ctr` of stream `seed`; never 0, so
/// logarithms of it stay finite.
fn uniform(seed: u64, ctr: u64) -> f64 {
    let bits = mix(seed.wrapping_add(ctr.wrapping_add(1).wrapping_mul(STREAM_STEP)));
    ((bits >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
}

/// Standard normal draw for increment `n` of stream `seed` (Box-Muller,
/// two counters per draw).
pub fn standard_normal(seed: u64, n: u64) -> f64 {
    let u1 = uniform(seed, 2 * n);
    let u2 = uniform(seed, 2 * n + 1);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A sampled scalar Brownian path on the uniform grid t_n = n dt.
#[derive(Clone, Debug)]
pub struct NoisePath {
    dt: f64,
    /// values at the nodes, starting from 0; length = step count + 1
    values: Vec<f64>,
}

impl NoisePath {
    /// Sample a path on [0, T]. T must be an integer multiple of dt.
    pub fn sample(seed: u64, horizon: f64, dt: f64) -> crate::Result<NoisePath> {
        let steps = checked_step_count(horizon, dt)?;
        let sqrt_dt = dt.sqrt();
        let mut values = Vec::with_capacity(steps + 1);
        let mut b = 0.0;
        values.push(b);
        for n in 0..steps {
            b += sqrt_dt * standard_normal(seed, n as u64);
            values.push(b);
        }
        Ok(NoisePath { dt, values })
    }

    /// Build a path directly from values at the nodes (first must be 0).
    pub fn from_values(dt: f64, values: Vec<f64>) -> crate::Result<NoisePath> {
        if !(dt > 0.0) || values.is_empty() || values[0] != 0.0 {
            return Err(crate::Error::InvalidParameter(
                "path needs dt > 0 and values starting at 0".into(),
            ));
        }
        Ok(NoisePath { dt, values })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step_count(&self) -> usize {
        self.values.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.step_count() as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Increment over step n.
    pub fn increment(&self, n: usize) -> f64 {
        self.values[n + 1] - self.values[n]
    }

    /// Coarse path on the grid with `factor` times the step: keeps every
    /// factor-th node, which is the same thing as summing consecutive fine
    /// increments. This is the refinement policy paired with per-index
    /// generation: coarse and fine paths agree exactly at shared nodes.
    pub fn coarsened(&self, factor: usize) -> crate::Result<NoisePath> {
        if factor == 0 || self.step_count() % factor != 0 {
            return Err(crate::Error::InvalidParameter(format!(
                "coarsening factor {factor} must divide the step count {}",
                self.step_count()
            )));
        }
        Ok(NoisePath {
            dt: self.dt * factor as f64,
            values: self.values.iter().copied().step_by(factor).collect(),
        })
    }
}

/// Number of steps in [0, T] at step dt, requiring T/dt to be integral up
/// to 1e-9 relative.
pub fn checked_step_count(horizon: f64, dt: f64) -> crate::Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(crate::Error::InvalidParameter(format!(
            "time step must be positive and finite, got {dt}"
        )));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(crate::Error::InvalidParameter(format!(
            "horizon must be positive and finite, got {horizon}"
        )));
    }
    let ratio = horizon / dt;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) || steps < 1.0 {
        return Err(crate::Error::InvalidParameter(format!(
            "horizon {horizon} is not an integer multiple of dt {dt}"
        )));
    }
    Ok(steps as usize)
}
