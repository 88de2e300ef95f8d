//! The dispersion substep: the free group exp(i chi Laplacian).
//!
//! Diagonal in Fourier space, each coefficient picks up exp(-i |k|^2 chi).
//! Solving this substep exactly is the reason the noise can enter through
//! plain increments: the pathwise (Stratonovich) solution of the linear
//! stochastic part is the group evaluated at the increment, with no
//! correction term.

use crate::field::{ComplexField, Cx, Dir, fft_all_axes};

/// Apply exp(i chi Laplacian) to `f`. chi = 0 is the identity (returned
/// without touching Fourier space, so a noise-free run is bitwise inert).
pub fn dispersion_flow(f: &ComplexField, chi: f64) -> crate::Result<ComplexField> {
    if !chi.is_finite() {
        return Err(crate::Error::InvalidParameter(format!(
            "dispersion increment must be finite, got {chi}"
        )));
    }
    let mut out = f.clone();
    dispersion_flow_unchecked(&mut out, chi);
    Ok(out)
}

/// In-place variant used by the stepping core.
pub(crate) fn dispersion_flow_unchecked(f: &mut ComplexField, chi: f64) {
    if chi == 0.0 {
        return;
    }
    let grid = f.grid().clone();
    let vals = f.values_mut();
    fft_all_axes(&grid, vals, Dir::Forward);
    let scale = 1.0 / grid.node_count() as f64;
    // the multiplier depends only on |k|^2, so the transform convention's
    // phase factors commute through and plain FFTs suffice
    for (idx, z) in vals.iter_mut().enumerate() {
        let theta = -grid.k_squared(idx) * chi;
        *z *= Cx::new(theta.cos(), theta.sin()) * scale;
    }
    fft_all_axes(&grid, vals, Dir::Inverse);
}
