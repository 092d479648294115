//! Multi-dimensional periodic FFT built from one-dimensional rustfft passes.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::LatticeGrid;

pub struct FftNd {
    grid: LatticeGrid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftNd {
    pub fn new(grid: &LatticeGrid) -> Self {
        let mut planner = FftPlanner::new();
        let n = grid.n_per_side();
        Self {
            grid: *grid,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn grid(&self) -> &LatticeGrid {
        &self.grid
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.forward);
    }

    /// Inverse transform in place, normalized so that `inverse(forward(x)) == x`.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.inverse);
        let scale = 1.0 / data.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    pub fn forward_real(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut data);
        data
    }

    /// Inverse transform keeping only the real part.
    pub fn inverse_real(&self, mut data: Vec<Complex64>) -> Vec<f64> {
        self.inverse(&mut data);
        data.into_iter().map(|c| c.re).collect()
    }

    fn run(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.grid.n_per_side();
        let sites = self.grid.sites();
        assert_eq!(data.len(), sites, "fft buffer length");
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        let mut line = vec![Complex64::default(); n];
        for axis in 0..self.grid.dim() {
            let stride = self.grid.stride(axis);
            if stride == 1 {
                for chunk in data.chunks_exact_mut(n) {
                    plan.process_with_scratch(chunk, &mut scratch);
                }
                continue;
            }
            let block = stride * n;
            for outer in (0..sites).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (k, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + k * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (k, v) in line.iter().enumerate() {
                        data[base + k * stride] = *v;
                    }
                }
            }
        }
    }

    /// Wave-number angles `2*pi*k/n` of a site index interpreted as a frequency.
    pub fn angles(&self, mode: usize) -> [f64; 3] {
        let c = self.grid.coords(mode);
        let n = self.grid.n_per_side() as f64;
        let mut theta = [0.0; 3];
        for axis in 0..self.grid.dim() {
            theta[axis] = 2.0 * std::f64::consts::PI * c[axis] as f64 / n;
        }
        theta
    }

    /// Symbol of the discrete negative Laplacian `D^T D` at a mode.
    pub fn laplacian_symbol(&self, mode: usize) -> f64 {
        let h = self.grid.spacing();
        let theta = self.angles(mode);
        (0..self.grid.dim()).map(|a| (2.0 - 2.0 * theta[a].cos()) / (h * h)).sum()
    }
}
