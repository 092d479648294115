//! Averages over periodic lattice balls for every center at once.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::grid::LatticeGrid;

/// Convolution with the normalized indicator of `B_radius`, evaluated by FFT.
pub struct BallAverager {
    grid: LatticeGrid,
    radius: f64,
    count: usize,
    kernel_hat: Vec<Complex64>,
}

impl BallAverager {
    pub fn new(grid: &LatticeGrid, fft: &FftNd, radius: f64) -> Result<Self> {
        let max = max_radius(grid);
        if radius > max {
            return Err(Error::BallTooLarge { radius, max });
        }
        let offsets = grid.ball_offsets(radius);
        let mut kernel = vec![0.0; grid.sites()];
        for z in &offsets {
            kernel[grid.offset(0, z)] += 1.0;
        }
        let count = offsets.len();
        let scale = 1.0 / count as f64;
        kernel.iter_mut().for_each(|v| *v *= scale);
        Ok(Self { grid: *grid, radius, count, kernel_hat: fft.forward_real(&kernel) })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Number of lattice sites in the ball.
    pub fn count(&self) -> usize {
        self.count
    }

    /// `out[x] = mean of values over x + B_radius`.
    pub fn average(&self, fft: &FftNd, values: &[f64]) -> Vec<f64> {
        assert_eq!(values.len(), self.grid.sites());
        let mut hat = fft.forward_real(values);
        for (v, k) in hat.iter_mut().zip(&self.kernel_hat) {
            *v *= *k;
        }
        fft.inverse_real(hat)
    }

    /// Same as `average`, for a spectrum the caller already computed.
    pub fn average_hat(&self, fft: &FftNd, values_hat: &[Complex64]) -> Vec<f64> {
        let hat: Vec<Complex64> = values_hat.iter().zip(&self.kernel_hat).map(|(v, k)| v * k).collect();
        fft.inverse_real(hat)
    }
}

/// Largest radius whose ball does not wrap onto itself.
pub fn max_radius(grid: &LatticeGrid) -> f64 {
    (grid.n_per_side() / 2 - 1) as f64 * grid.spacing()
}

/// Direct summation; used as an oracle and for single centers.
pub fn ball_average_at(grid: &LatticeGrid, values: &[f64], center: usize, offsets: &[[i64; 3]]) -> f64 {
    offsets.iter().map(|z| values[grid.offset(center, z)]).sum::<f64>() / offsets.len() as f64
}
