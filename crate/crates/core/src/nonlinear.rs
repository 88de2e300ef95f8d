//! The log-nonlinear substep.
//!
//! The flow treated here is du/dt = i*lambda*f(|u|^2)u + i*V[u]u - a1*u with
//! f the regularized logarithm and V[u] a periodic convolution of a real
//! kernel with |u|^2. Because |u(t)| = exp(-a1*t)|u(0)| pointwise, both
//! phase sources are explicit functions of time and the flow has an exact
//! one-step form: the modulus contracts by exp(-a1*dt) and the phase
//! advances by lambda * Phi(|u(0)|^2, dt) + Psi(dt) * V[u(0)], where
//!
//!   Phi(s, dt) = int_0^dt f(s * exp(-2 a1 r)) dr,
//!   Psi(dt)    = (1 - exp(-2 a1 dt)) / (2 a1)   (dt when a1 = 0).
//!
//! Exactness of this substep is what makes the overall splitting preserve
//! the decay law of the mass without time-discretization error.

use crate::field::{Cx, ComplexField, Dir, Grid, fft_all_axes};
use crate::util::gauss_legendre_8;

/// Regularized logarithm: log((delta + s) / (1 + delta s)), recovering
/// log(s) at delta = 0. Monotone in s, bounded by |log delta| for
/// delta in (0, 1).
pub fn regularized_log(s: f64, delta: f64) -> crate::Result<f64> {
    if delta < 0.0 {
        return Err(crate::Error::InvalidParameter(format!(
            "regularization must be >= 0, got {delta}"
        )));
    }
    if s < 0.0 {
        return Err(crate::Error::InvalidParameter(format!(
            "squared modulus must be >= 0, got {s}"
        )));
    }
    if delta == 0.0 {
        Ok(s.ln())
    } else {
        Ok(((delta + s) / (1.0 + delta * s)).ln())
    }
}

/// Real convolution kernel with its transform cached; the transform is what
/// every application of the potential actually uses.
#[derive(Clone, Debug)]
pub struct PotentialKernel {
    grid: Grid,
    samples: Vec<f64>,
    hat: Vec<Cx>,
}

impl PotentialKernel {
    pub fn from_samples(grid: Grid, samples: Vec<f64>) -> crate::Result<PotentialKernel> {
        if samples.len() != grid.node_count() {
            return Err(crate::Error::GridMismatch(format!(
                "kernel has {} samples, grid expects {}",
                samples.len(),
                grid.node_count()
            )));
        }
        let field = ComplexField::new(
            grid.clone(),
            samples.iter().map(|&v| Cx::new(v, 0.0)).collect(),
        )?;
        let hat = field.spectral_transform().into_values();
        Ok(PotentialKernel { grid, samples, hat })
    }

    /// Gaussian kernel strength * exp(-|x|^2 / (2 width^2)).
    pub fn gaussian(grid: Grid, strength: f64, width: f64) -> crate::Result<PotentialKernel> {
        if !(width > 0.0) {
            return Err(crate::Error::InvalidParameter(format!(
                "kernel width must be positive, got {width}"
            )));
        }
        let samples = (0..grid.node_count())
            .map(|idx| strength * (-grid.x_squared(idx) / (2.0 * width * width)).exp())
            .collect();
        PotentialKernel::from_samples(grid, samples)
    }

    /// Load from a field snapshot; the kernel must be real.
    pub fn from_snapshot(path: &std::path::Path) -> crate::Result<PotentialKernel> {
        let f = crate::snapshot::read_snapshot(path)?;
        let scale = f
            .values()
            .iter()
            .map(|z| z.norm())
            .fold(0.0f64, f64::max)
            .max(1.0);
        let worst = f.values().iter().map(|z| z.im.abs()).fold(0.0f64, f64::max);
        if worst > 1e-12 * scale {
            return Err(crate::Error::InvalidParameter(format!(
                "potential kernel must be real; imaginary part reaches {worst:e}"
            )));
        }
        let grid = f.grid().clone();
        PotentialKernel::from_samples(grid, f.values().iter().map(|z| z.re).collect())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

/// V[f] = quadrature convolution of the kernel with |f|^2, evaluated
/// spectrally: both transforms multiply pointwise in k. The result of the
/// inverse transform is real up to roundoff; the imaginary residual is
/// dropped after a debug assertion.
pub fn apply_potential(f: &ComplexField, kernel: &PotentialKernel) -> crate::Result<Vec<f64>> {
    if f.grid() != &kernel.grid {
        return Err(crate::Error::GridMismatch(
            "potential kernel and field live on different grids".into(),
        ));
    }
    let grid = f.grid();
    // |f|^2 goes through a plain DFT. The kernel's cached transform carries
    // the quadrature volume, and its alternating signs are exactly the
    // spectral form of the half-box rotation from node order to offset
    // order, so the product needs only the plain inverse pass and its 1/N^d
    // normalization.
    let mut buf: Vec<Cx> = f.values().iter().map(|z| Cx::new(z.norm_sqr(), 0.0)).collect();
    fft_all_axes(grid, &mut buf, Dir::Forward);
    for (b, k) in buf.iter_mut().zip(&kernel.hat) {
        *b *= k;
    }
    fft_all_axes(grid, &mut buf, Dir::Inverse);
    let scale = 1.0 / grid.node_count() as f64;
    let mut out = Vec::with_capacity(buf.len());
    let mut worst_im = 0.0f64;
    let mut worst_re = 0.0f64;
    for z in &buf {
        let re = z.re * scale;
        worst_im = worst_im.max((z.im * scale).abs());
        worst_re = worst_re.max(re.abs());
        out.push(re);
    }
    debug_assert!(
        worst_im <= 1e-12 * worst_re.max(1.0),
        "potential output drifted off the real axis: {worst_im:e}"
    );
    Ok(out)
}

/// Parameters of the nonlinear substep.
#[derive(Clone, Debug)]
pub struct NonlinearParams {
    /// Coupling strength of the log term.
    pub coupling: f64,
    /// Regularization of the logarithm; 0 is the unregularized limit.
    pub regularization: f64,
    /// Linear damping rate; must be >= 0.
    pub damping: f64,
    /// Optional convolution potential.
    pub potential: Option<PotentialKernel>,
}

impl NonlinearParams {
    pub fn new(coupling: f64, regularization: f64, damping: f64) -> NonlinearParams {
        NonlinearParams {
            coupling,
            regularization,
            damping,
            potential: None,
        }
    }

    pub fn with_potential(mut self, kernel: PotentialKernel) -> NonlinearParams {
        self.potential = Some(kernel);
        self
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.regularization < 0.0 {
            return Err(crate::Error::InvalidParameter(format!(
                "regularization must be >= 0, got {}",
                self.regularization
            )));
        }
        if self.damping < 0.0 {
            return Err(crate::Error::InvalidParameter(format!(
                "damping must be >= 0, got {}",
                self.damping
            )));
        }
        if !self.coupling.is_finite() || !self.regularization.is_finite() || !self.damping.is_finite()
        {
            return Err(crate::Error::InvalidParameter(
                "nonlinear parameters must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Phi(s, dt): accumulated log phase per unit coupling over one substep.
/// Closed form for delta = 0 (with Phi(0, dt) = 0 so that zero samples stay
/// exactly zero); fixed-order quadrature otherwise.
pub fn phase_integral(s: f64, dt: f64, params: &NonlinearParams) -> crate::Result<f64> {
    params.validate()?;
    if !(dt > 0.0) {
        return Err(crate::Error::InvalidParameter(format!(
            "substep length must be positive, got {dt}"
        )));
    }
    if s < 0.0 {
        return Err(crate::Error::InvalidParameter(format!(
            "squared modulus must be >= 0, got {s}"
        )));
    }
    Ok(phase_integral_unchecked(
        s,
        dt,
        params.regularization,
        params.damping,
    ))
}

pub(crate) fn phase_integral_unchecked(s: f64, dt: f64, delta: f64, damping: f64) -> f64 {
    if delta == 0.0 {
        if s == 0.0 {
            return 0.0;
        }
        // int_0^dt (log s - 2 a1 r) dr
        return dt * s.ln() - damping * dt * dt;
    }
    gauss_legendre_8(0.0, dt, |r| {
        let se = s * (-2.0 * damping * r).exp();
        ((delta + se) / (1.0 + delta * se)).ln()
    })
}

/// Exact flow of the nonlinear substep over `dt`.
pub fn nonlinear_flow(
    f: &ComplexField,
    dt: f64,
    params: &NonlinearParams,
) -> crate::Result<ComplexField> {
    params.validate()?;
    if !(dt > 0.0) {
        return Err(crate::Error::InvalidParameter(format!(
            "substep length must be positive, got {dt}"
        )));
    }
    let mut out = f.clone();
    nonlinear_flow_unchecked(&mut out, dt, params)?;
    Ok(out)
}

/// In-place flow; parameters assumed validated. Used by the stepping core.
pub(crate) fn nonlinear_flow_unchecked(
    f: &mut ComplexField,
    dt: f64,
    params: &NonlinearParams,
) -> crate::Result<()> {
    let a1 = params.damping;
    let decay = (-a1 * dt).exp();
    let psi = if a1 == 0.0 {
        dt
    } else {
        (1.0 - (-2.0 * a1 * dt).exp()) / (2.0 * a1)
    };
    let pot = match &params.potential {
        Some(k) => Some(apply_potential(f, k)?),
        None => None,
    };
    let delta = params.regularization;
    let lambda = params.coupling;
    for (idx, z) in f.values_mut().iter_mut().enumerate() {
        let s = z.norm_sqr();
        let mut phase = lambda * phase_integral_unchecked(s, dt, delta, a1);
        if s == 0.0 && delta == 0.0 {
            phase = 0.0;
        }
        if let Some(v) = &pot {
            phase += psi * v[idx];
        }
        *z *= decay * Cx::new(phase.cos(), phase.sin());
    }
    Ok(())
}
