//! Periodic grids, complex fields and their norms.
//!
//! The domain is the box [-L/2, L/2)^d with d in {1, 2}, discretized by N
//! nodes per axis (N a power of two, N >= 8). The discrete transform pair is
//!
//!   F[f](k) = dx^d * sum_j f_j exp(-i k.x_j),
//!   f_j     = L^-d * sum_k F[f](k) exp(+i k.x_j),
//!
//! over wavenumbers k = 2*pi*m/L with integer m in [-N/2, N/2). Under this
//! convention Parseval reads dx^d sum |f_j|^2 = L^-d sum |F(k)|^2, constants
//! transform to L^d at k = 0, and a single Fourier mode has one coefficient
//! of magnitude L^d.

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::fmt;
use std::sync::Arc;

/// Complex sample type used throughout.
pub type Cx = Complex64;

struct GridInner {
    dim: usize,
    n: usize,
    length: f64,
    /// wavenumbers per axis in FFT bin order: 0, 1, .., N/2-1, -N/2, .., -1
    /// scaled by 2*pi/L.
    wavenumbers: Vec<f64>,
    /// node coordinates per axis: -L/2 + i*dx, same formula everywhere so
    /// dilated grids align bit-for-bit.
    coords: Vec<f64>,
    fft_fwd: Arc<dyn Fft<f64>>,
    fft_inv: Arc<dyn Fft<f64>>,
}

/// Uniform periodic grid; cheap to clone (shared interior).
#[derive(Clone)]
pub struct Grid {
    inner: Arc<GridInner>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("dim", &self.dim())
            .field("n", &self.n())
            .field("length", &self.length())
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.dim() == other.dim() && self.n() == other.n() && self.length() == other.length()
    }
}

impl Grid {
    /// Build a grid. `dim` in {1,2}, `n` a power of two >= 8, `length` > 0.
    pub fn new(dim: usize, n: usize, length: f64) -> crate::Result<Grid> {
        if dim != 1 && dim != 2 {
            return Err(crate::Error::InvalidGrid(format!(
                "dimension must be 1 or 2, got {dim}"
            )));
        }
        if n < 8 || !n.is_power_of_two() {
            return Err(crate::Error::InvalidGrid(format!(
                "nodes per axis must be a power of two >= 8, got {n}"
            )));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(crate::Error::InvalidGrid(format!(
                "box length must be positive and finite, got {length}"
            )));
        }
        let base = 2.0 * std::f64::consts::PI / length;
        let wavenumbers = (0..n)
            .map(|i| {
                let m = if i < n / 2 { i as i64 } else { i as i64 - n as i64 };
                base * m as f64
            })
            .collect();
        let coords = (0..n)
            .map(|i| (i as f64 / n as f64 - 0.5) * length)
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Grid {
            inner: Arc::new(GridInner {
                dim,
                n,
                length,
                wavenumbers,
                coords,
                fft_fwd: planner.plan_fft(n, FftDirection::Forward),
                fft_inv: planner.plan_fft(n, FftDirection::Inverse),
            }),
        })
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    /// Nodes per axis.
    pub fn n(&self) -> usize {
        self.inner.n
    }

    /// Box side length L; domain is [-L/2, L/2) per axis.
    pub fn length(&self) -> f64 {
        self.inner.length
    }

    /// Node spacing L/N.
    pub fn dx(&self) -> f64 {
        self.inner.length / self.inner.n as f64
    }

    /// Total node count N^d.
    pub fn node_count(&self) -> usize {
        self.inner.n.pow(self.inner.dim as u32)
    }

    /// Quadrature weight dx^d of the rectangle rule.
    pub fn cell_volume(&self) -> f64 {
        self.dx().powi(self.inner.dim as i32)
    }

    /// Wavenumbers along one axis in FFT bin order.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.inner.wavenumbers
    }

    /// Node coordinates along one axis.
    pub fn coords(&self) -> &[f64] {
        &self.inner.coords
    }

    /// |k|^2 for the flattened node `idx` (row-major for d = 2).
    pub fn k_squared(&self, idx: usize) -> f64 {
        let ks = &self.inner.wavenumbers;
        match self.inner.dim {
            1 => ks[idx] * ks[idx],
            _ => {
                let n = self.inner.n;
                let kr = ks[idx / n];
                let kc = ks[idx % n];
                kr * kr + kc * kc
            }
        }
    }

    /// |x|^2 at the flattened node `idx`.
    pub fn x_squared(&self, idx: usize) -> f64 {
        let xs = &self.inner.coords;
        match self.inner.dim {
            1 => xs[idx] * xs[idx],
            _ => {
                let n = self.inner.n;
                let xr = xs[idx / n];
                let xc = xs[idx % n];
                xr * xr + xc * xc
            }
        }
    }

    fn fwd(&self) -> &Arc<dyn Fft<f64>> {
        &self.inner.fft_fwd
    }

    fn inv(&self) -> &Arc<dyn Fft<f64>> {
        &self.inner.fft_inv
    }
}

/// Complex field sampled on a [`Grid`], flattened row-major for d = 2.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    grid: Grid,
    values: Vec<Cx>,
}

impl ComplexField {
    pub fn new(grid: Grid, values: Vec<Cx>) -> crate::Result<ComplexField> {
        if values.len() != grid.node_count() {
            return Err(crate::Error::GridMismatch(format!(
                "field has {} samples, grid expects {}",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(ComplexField { grid, values })
    }

    pub fn zeros(grid: Grid) -> ComplexField {
        let n = grid.node_count();
        ComplexField {
            grid,
            values: vec![Cx::new(0.0, 0.0); n],
        }
    }

    /// Sample a function of the node coordinates.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> Cx) -> ComplexField {
        let n = grid.n();
        let values = match grid.dim() {
            1 => grid.coords().iter().map(|&x| f(&[x])).collect(),
            _ => {
                let mut v = Vec::with_capacity(n * n);
                for &xr in grid.coords() {
                    for &xc in grid.coords() {
                        v.push(f(&[xr, xc]));
                    }
                }
                v
            }
        };
        ComplexField { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[Cx] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Cx] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Cx> {
        self.values
    }

    /// True if any sample is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.values
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
    }

    /// Rectangle-rule L2 norm: sqrt(dx^d sum |f_j|^2).
    pub fn l2_norm(&self) -> f64 {
        let s: f64 = self.values.iter().map(|z| z.norm_sqr()).sum();
        (self.grid.cell_volume() * s).sqrt()
    }

    /// Weighted norm sqrt(dx^d sum (1+|x_j|^2)^alpha |f_j|^2), alpha in [0,1].
    /// Coordinates are the torus representatives in [-L/2, L/2).
    pub fn weighted_norm(&self, alpha: f64) -> crate::Result<f64> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(crate::Error::InvalidParameter(format!(
                "weight exponent must lie in [0, 1], got {alpha}"
            )));
        }
        let mut s = 0.0;
        for (idx, z) in self.values.iter().enumerate() {
            let w = (1.0 + self.grid.x_squared(idx)).powf(alpha);
            s += w * z.norm_sqr();
        }
        Ok((self.grid.cell_volume() * s).sqrt())
    }

    /// Spectral gradient seminorm sqrt(L^-d sum |k|^2 |F(k)|^2).
    pub fn grad_l2_norm(&self) -> f64 {
        let hat = self.spectral_transform();
        let ld = self.grid.length().powi(self.grid.dim() as i32);
        let s: f64 = hat
            .values
            .iter()
            .enumerate()
            .map(|(idx, z)| self.grid.k_squared(idx) * z.norm_sqr())
            .sum();
        (s / ld).sqrt()
    }

    /// sqrt(l2^2 + grad_l2^2).
    pub fn h1_norm(&self) -> f64 {
        let l2 = self.l2_norm();
        let g = self.grad_l2_norm();
        (l2 * l2 + g * g).sqrt()
    }

    /// sqrt(h1^2 + weighted(alpha = 1)^2); the state-space norm for exit
    /// domains.
    pub fn x1_norm(&self) -> f64 {
        let h1 = self.h1_norm();
        let w = self.weighted_norm(1.0).expect("alpha = 1 is always valid");
        (h1 * h1 + w * w).sqrt()
    }

    /// Discrete Lebesgue norm (cell_volume * sum |f|^p)^(1/p).
    pub fn lp_norm(&self, p: f64) -> crate::Result<f64> {
        if !p.is_finite() || p < 1.0 {
            return Err(crate::Error::InvalidParameter(format!(
                "Lebesgue exponent must be >= 1, got {p}"
            )));
        }
        let sum: f64 = self.values.iter().map(|v| v.norm().powf(p)).sum();
        Ok((self.grid.cell_volume() * sum).powf(1.0 / p))
    }

    /// Largest modulus over nodes whose coordinate along some axis lies in
    /// the outermost 5% of the box. Reported by experiments as a truncation
    /// diagnostic: mass reaching the boundary shell invalidates the periodic
    /// surrogate of the whole-space dynamics.
    pub fn boundary_shell_max(&self) -> f64 {
        let half = 0.5 * self.grid.length();
        let cut = 0.95 * half;
        let mut best: f64 = 0.0;
        for (idx, z) in self.values.iter().enumerate() {
            let in_shell = match self.grid.dim() {
                1 => self.grid.coords()[idx].abs() >= cut,
                _ => {
                    let n = self.grid.n();
                    self.grid.coords()[idx / n].abs() >= cut
                        || self.grid.coords()[idx % n].abs() >= cut
                }
            };
            if in_shell {
                best = best.max(z.norm());
            }
        }
        best
    }

    /// Forward transform under the fixed convention (see module docs).
    pub fn spectral_transform(&self) -> ComplexField {
        let mut out = self.values.clone();
        fft_all_axes(&self.grid, &mut out, Dir::Forward);
        // dx^d and the node offset -L/2, which contributes (-1)^m per axis
        let vol = self.grid.cell_volume();
        apply_mode_signs(&self.grid, &mut out, vol);
        ComplexField {
            grid: self.grid.clone(),
            values: out,
        }
    }

    /// Inverse of [`spectral_transform`]; exact up to roundoff.
    pub fn inverse_transform(&self) -> ComplexField {
        let mut vals = self.values.clone();
        // undo sign and volume first, then unnormalized inverse FFT / N^d
        let vol = self.grid.cell_volume();
        apply_mode_signs(&self.grid, &mut vals, 1.0 / vol);
        fft_all_axes(&self.grid, &mut vals, Dir::Inverse);
        let scale = 1.0 / (self.grid.node_count() as f64);
        for z in &mut vals {
            *z *= scale;
        }
        ComplexField {
            grid: self.grid.clone(),
            values: vals,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
pub(crate) enum Dir {
    Forward,
    Inverse,
}

/// Unnormalized FFT along every axis, in place. Row-major layout; columns of
/// a 2-d field are gathered into a scratch buffer.
pub(crate) fn fft_all_axes(grid: &Grid, values: &mut [Cx], dir: Dir) {
    let n = grid.n();
    let fft = match dir {
        Dir::Forward => grid.fwd(),
        Dir::Inverse => grid.inv(),
    };
    let mut scratch = vec![Cx::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    match grid.dim() {
        1 => fft.process_with_scratch(values, &mut scratch),
        _ => {
            for row in values.chunks_exact_mut(n) {
                fft.process_with_scratch(row, &mut scratch);
            }
            let mut col = vec![Cx::new(0.0, 0.0); n];
            for c in 0..n {
                for r in 0..n {
                    col[r] = values[r * n + c];
                }
                fft.process_with_scratch(&mut col, &mut scratch);
                for r in 0..n {
                    values[r * n + c] = col[r];
                }
            }
        }
    }
}

/// Multiply coefficient m (per axis) by scale * (-1)^m; its own inverse up
/// to the scale, since the sign pattern squares to one.
fn apply_mode_signs(grid: &Grid, values: &mut [Cx], scale: f64) {
    let n = grid.n();
    let sign = |i: usize| if i % 2 == 0 { 1.0 } else { -1.0 };
    match grid.dim() {
        1 => {
            for (i, z) in values.iter_mut().enumerate() {
                *z *= sign(i) * scale;
            }
        }
        _ => {
            for (idx, z) in values.iter_mut().enumerate() {
                *z *= sign(idx / n) * sign(idx % n) * scale;
            }
        }
    }
}

/// L2 distance between two fields on the same grid.
pub fn l2_distance(a: &ComplexField, b: &ComplexField) -> crate::Result<f64> {
    if a.grid() != b.grid() {
        return Err(crate::Error::GridMismatch(
            "distance requires a common grid".into(),
        ));
    }
    let s: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).norm_sqr())
        .sum();
    Ok((a.grid().cell_volume() * s).sqrt())
}

/// X1 distance sqrt(h1(a-b)^2 + weighted(a-b, 1)^2).
pub fn x1_distance(a: &ComplexField, b: &ComplexField) -> crate::Result<f64> {
    if a.grid() != b.grid() {
        return Err(crate::Error::GridMismatch(
            "distance requires a common grid".into(),
        ));
    }
    let mut diff = a.clone();
    for (d, y) in diff.values_mut().iter_mut().zip(b.values()) {
        *d -= y;
    }
    Ok(diff.x1_norm())
}

/// Gaussian bump amp * exp(-|x - center|^2 / (2 width^2)).
pub fn gaussian(grid: Grid, amp: f64, width: f64, center: &[f64]) -> ComplexField {
    let c = center.to_vec();
    ComplexField::from_fn(grid, move |x| {
        let r2: f64 = x
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let d = xi - c.get(i).copied().unwrap_or(0.0);
                d * d
            })
            .sum();
        Cx::new(amp * (-r2 / (2.0 * width * width)).exp(), 0.0)
    })
}

/// Unit-amplitude Fourier mode exp(i 2 pi m . x / L) for integer modes m.
pub fn plane_wave(grid: Grid, modes: &[i64]) -> ComplexField {
    let base = 2.0 * std::f64::consts::PI / grid.length();
    let m = modes.to_vec();
    ComplexField::from_fn(grid, move |x| {
        let phase: f64 = x
            .iter()
            .enumerate()
            .map(|(i, &xi)| base * m.get(i).copied().unwrap_or(0) as f64 * xi)
            .sum();
        Cx::new(phase.cos(), phase.sin())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PI: f64 = std::f64::consts::PI;

    #[test]
    fn grid_1d_small() {
        let g = Grid::new(1, 8, 2.0 * PI).unwrap();
        assert_eq!(g.dx(), PI / 4.0);
        let mut ms: Vec<i64> = g
            .wavenumbers()
            .iter()
            .map(|&k| (k / 1.0).round() as i64)
            .collect();
        ms.sort_unstable();
        assert_eq!(ms, vec![-4, -3, -2, -1, 0, 1, 2, 3]);
    }

    #[test]
    fn grid_2d_counts() {
        let g = Grid::new(2, 16, 10.0).unwrap();
        assert_eq!(g.node_count(), 256);
        assert_eq!(g.dx(), 0.625);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(Grid::new(1, 7, 1.0).is_err());
        assert!(Grid::new(1, 4, 1.0).is_err());
        assert!(Grid::new(3, 16, 1.0).is_err());
        assert!(Grid::new(1, 16, 0.0).is_err());
        assert!(Grid::new(1, 16, -2.0).is_err());
        assert!(Grid::new(1, 16, f64::INFINITY).is_err());
    }

    fn std_gaussian_256() -> ComplexField {
        let g = Grid::new(1, 256, 40.0).unwrap();
        gaussian(g, 1.0, 1.0, &[0.0])
    }

    #[test]
    fn l2_of_gaussian() {
        // integral of exp(-x^2) is sqrt(pi); truncation at |x| = 20 is
        // far below roundoff
        let f = std_gaussian_256();
        assert!((f.l2_norm() - PI.powf(0.25)).abs() < 1e-8);
    }

    #[test]
    fn l2_zero_field() {
        let g = Grid::new(1, 16, 5.0).unwrap();
        assert_eq!(ComplexField::zeros(g).l2_norm(), 0.0);
    }

    #[test]
    fn l2_plane_wave() {
        let g = Grid::new(1, 64, 2.0 * PI).unwrap();
        let f = plane_wave(g, &[1]);
        assert!((f.l2_norm() - (2.0 * PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn weighted_matches_closed_forms() {
        let f = std_gaussian_256();
        assert!((f.weighted_norm(0.0).unwrap() - f.l2_norm()).abs() == 0.0);
        let want = (PI.sqrt() + PI.sqrt() / 2.0).sqrt();
        assert!((f.weighted_norm(1.0).unwrap() - want).abs() < 1e-8);
        assert!(f.weighted_norm(1.5).is_err());
        assert!(f.weighted_norm(-0.1).is_err());
    }

    #[test]
    fn weighted_monotone_in_alpha() {
        let f = std_gaussian_256();
        let a = f.weighted_norm(0.3).unwrap();
        let b = f.weighted_norm(0.7).unwrap();
        assert!(a <= b);
    }

    #[test]
    fn grad_of_plane_wave() {
        let g = Grid::new(1, 64, 2.0 * PI).unwrap();
        for m in [1i64, 3, -5] {
            let f = plane_wave(g.clone(), &[m]);
            let want = (m.abs() as f64) * (2.0 * PI).sqrt();
            assert!(
                (f.grad_l2_norm() - want).abs() < 1e-10,
                "mode {m}: {} vs {want}",
                f.grad_l2_norm()
            );
        }
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let g = Grid::new(1, 32, 7.0).unwrap();
        let f = ComplexField::from_fn(g, |_| Cx::new(2.5, -1.0));
        assert!(f.grad_l2_norm() < 1e-12);
    }

    #[test]
    fn grad_of_gaussian() {
        let f = std_gaussian_256();
        let want = (PI.sqrt() / 2.0).sqrt();
        assert!((f.grad_l2_norm() - want).abs() < 1e-8);
    }

    #[test]
    fn lp_norm_closed_forms() {
        // plane wave has modulus 1 everywhere: lp = L^(1/p)
        let g = Grid::new(1, 64, 2.0 * PI).unwrap();
        let f = plane_wave(g, &[3]);
        for p in [2.0, 4.0, 6.0] {
            let want = (2.0 * PI).powf(1.0 / p);
            assert!((f.lp_norm(p).unwrap() - want).abs() < 1e-12);
        }

        // Gaussian L4: (int exp(-2x^2))^(1/4) = (pi/2)^(1/8)
        let gau = std_gaussian_256();
        let want = (PI / 2.0).sqrt().sqrt().sqrt();
        assert!((gau.lp_norm(4.0).unwrap() - want).abs() < 1e-10);
        // p = 2 agrees with the l2 norm
        assert!((gau.lp_norm(2.0).unwrap() - gau.l2_norm()).abs() < 1e-13);

        assert!(gau.lp_norm(0.5).is_err());
        assert!(gau.lp_norm(f64::INFINITY).is_err());
    }

    #[test]
    fn x1_norm_closed_forms() {
        let g = Grid::new(1, 64, 2.0 * PI).unwrap();
        let f = plane_wave(g.clone(), &[1]);
        // l2^2 = 2pi and grad^2 = 2pi exactly; the weighted part is the
        // lattice sum dx sum (1 + x_j^2) = 2pi + 2pi^3/3 + 4pi^3/(3 N^2),
        // whose last term is the exact rectangle-rule correction for the
        // non-periodic weight
        let n2 = (g.n() * g.n()) as f64;
        let weighted_sq = 2.0 * PI + 2.0 * PI.powi(3) / 3.0 + 4.0 * PI.powi(3) / (3.0 * n2);
        let want = (4.0 * PI + weighted_sq).sqrt();
        assert!(
            (f.x1_norm() - want).abs() < 1e-12,
            "{} vs {want}",
            f.x1_norm()
        );
        // the correction vanishes quadratically with resolution
        let fine = plane_wave(Grid::new(1, 1024, 2.0 * PI).unwrap(), &[1]);
        let continuum = (4.0 * PI + 2.0 * PI + 2.0 * PI.powi(3) / 3.0).sqrt();
        assert!((fine.x1_norm() - continuum).abs() < 2e-5);

        let gau = std_gaussian_256();
        let want = (PI.sqrt() + PI.sqrt() / 2.0 + PI.sqrt() + PI.sqrt() / 2.0).sqrt();
        assert!((gau.x1_norm() - want).abs() < 1e-8);

        let z = ComplexField::zeros(Grid::new(1, 16, 4.0).unwrap());
        assert_eq!(z.x1_norm(), 0.0);
    }

    #[test]
    fn x1_is_pythagorean() {
        let f = std_gaussian_256();
        let h1 = f.h1_norm();
        let w = f.weighted_norm(1.0).unwrap();
        assert!((f.x1_norm() - (h1 * h1 + w * w).sqrt()).abs() < 1e-13);
    }

    #[test]
    fn transform_of_single_mode() {
        let g = Grid::new(1, 64, 2.0 * PI).unwrap();
        let f = plane_wave(g.clone(), &[3]);
        let hat = f.spectral_transform();
        for (i, z) in hat.values().iter().enumerate() {
            if i == 3 {
                assert!((z.norm() - g.length()).abs() < 1e-10);
                // coefficient should be real-positive: the mode matches the
                // basis function exactly
                assert!((z.re - g.length()).abs() < 1e-10);
            } else {
                assert!(z.norm() < 1e-10, "leak at bin {i}: {}", z.norm());
            }
        }
    }

    #[test]
    fn transform_of_constant() {
        let g = Grid::new(2, 16, 5.0).unwrap();
        let f = ComplexField::from_fn(g.clone(), |_| Cx::new(1.0, 0.0));
        let hat = f.spectral_transform();
        assert!((hat.values()[0].re - g.length().powi(2)).abs() < 1e-9);
        let leak: f64 = hat.values()[1..].iter().map(|z| z.norm()).sum();
        assert!(leak < 1e-9);
    }

    #[test]
    fn roundtrip_2d() {
        let g = Grid::new(2, 16, 3.0).unwrap();
        let f = ComplexField::from_fn(g, |x| Cx::new((x[0] * 2.0).sin(), (x[1] - x[0]).cos()));
        let back = f.spectral_transform().inverse_transform();
        let err = l2_distance(&f, &back).unwrap();
        assert!(err < 1e-12, "roundtrip error {err}");
    }

    #[test]
    fn boundary_shell_sees_edge_mass() {
        let g = Grid::new(1, 256, 40.0).unwrap();
        let centered = gaussian(g.clone(), 1.0, 1.0, &[0.0]);
        assert!(centered.boundary_shell_max() < 1e-70);
        let shifted = gaussian(g, 1.0, 1.0, &[19.5]);
        assert!(shifted.boundary_shell_max() > 0.5);
    }

    #[test]
    fn distances_require_same_grid() {
        let a = ComplexField::zeros(Grid::new(1, 16, 4.0).unwrap());
        let b = ComplexField::zeros(Grid::new(1, 32, 4.0).unwrap());
        assert!(l2_distance(&a, &b).is_err());
        assert!(x1_distance(&a, &b).is_err());
    }
}
