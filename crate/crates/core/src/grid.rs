//! Periodic cubic lattices and the index arithmetic shared by every module.
//!
//! Sites are stored in row-major order: axis 0 varies slowest. All index
//! arithmetic wraps modulo `n_per_side`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeGrid {
    dim: usize,
    n_per_side: usize,
    side_length: f64,
}

impl LatticeGrid {
    pub fn new(dim: usize, n_per_side: usize, side_length: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dim must be 1, 2 or 3, got {dim}")));
        }
        if n_per_side < 2 || !n_per_side.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "n_per_side must be a power of two >= 2, got {n_per_side}"
            )));
        }
        if !(side_length.is_finite() && side_length > 0.0) {
            return Err(Error::InvalidGrid(format!("side_length must be positive, got {side_length}")));
        }
        if n_per_side.checked_pow(dim as u32).is_none_or(|s| s > u32::MAX as usize) {
            return Err(Error::InvalidGrid("too many sites".into()));
        }
        Ok(Self { dim, n_per_side, side_length })
    }

    /// Grid with unit spacing, so lattice and length units coincide.
    pub fn unit_spacing(dim: usize, n_per_side: usize) -> Result<Self> {
        Self::new(dim, n_per_side, n_per_side as f64)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_per_side(&self) -> usize {
        self.n_per_side
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    pub fn spacing(&self) -> f64 {
        self.side_length / self.n_per_side as f64
    }

    pub fn sites(&self) -> usize {
        self.n_per_side.pow(self.dim as u32)
    }

    /// Same lattice, different physical size.
    pub fn with_side_length(&self, side_length: f64) -> Result<Self> {
        Self::new(self.dim, self.n_per_side, side_length)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.n_per_side.pow((self.dim - 1 - axis) as u32)
    }

    pub fn coords(&self, mut site: usize) -> [usize; 3] {
        let mut c = [0usize; 3];
        for axis in (0..self.dim).rev() {
            c[axis] = site % self.n_per_side;
            site /= self.n_per_side;
        }
        c
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords[..self.dim]
            .iter()
            .fold(0, |acc, &c| acc * self.n_per_side + c % self.n_per_side)
    }

    /// Site reached from `site` by the signed lattice offset, with wrap-around.
    pub fn offset(&self, site: usize, offset: &[i64]) -> usize {
        let n = self.n_per_side as i64;
        let c = self.coords(site);
        let mut shifted = [0usize; 3];
        for axis in 0..self.dim {
            shifted[axis] = (c[axis] as i64 + offset[axis]).rem_euclid(n) as usize;
        }
        self.index(&shifted)
    }

    /// Signed minimum-image displacement (in lattice units) of a coordinate difference.
    pub fn min_image(&self, delta: i64) -> i64 {
        let n = self.n_per_side as i64;
        let d = delta.rem_euclid(n);
        if d > n / 2 {
            d - n
        } else {
            d
        }
    }

    /// Periodic Euclidean distance between two sites in length units.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let ca = self.coords(a);
        let cb = self.coords(b);
        let mut s = 0.0;
        for axis in 0..self.dim {
            let d = self.min_image(ca[axis] as i64 - cb[axis] as i64) as f64;
            s += d * d;
        }
        s.sqrt() * self.spacing()
    }

    /// Minimum-image position of a site relative to the origin, in length units.
    pub fn position(&self, site: usize) -> [f64; 3] {
        let c = self.coords(site);
        let mut x = [0.0; 3];
        for axis in 0..self.dim {
            x[axis] = self.min_image(c[axis] as i64) as f64 * self.spacing();
        }
        x
    }

    /// Lattice offsets whose length is at most `radius` (length units).
    pub fn ball_offsets(&self, radius: f64) -> Vec<[i64; 3]> {
        let r = radius / self.spacing();
        let reach = r.floor() as i64;
        let r2 = r * r + 1e-9;
        let mut out = Vec::new();
        let range = |active: bool| if active { -reach..=reach } else { 0..=0 };
        for i in range(true) {
            for j in range(self.dim > 1) {
                for k in range(self.dim > 2) {
                    if ((i * i + j * j + k * k) as f64) <= r2 {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }

    /// Neighbor tables for fast stencil application.
    pub fn neighbors(&self) -> Neighbors {
        let sites = self.sites();
        let n = self.n_per_side;
        let mut fwd = Vec::with_capacity(self.dim);
        let mut bwd = Vec::with_capacity(self.dim);
        for axis in 0..self.dim {
            let stride = self.stride(axis);
            let mut f = Vec::with_capacity(sites);
            let mut b = Vec::with_capacity(sites);
            for site in 0..sites {
                let c = (site / stride) % n;
                let up = if c + 1 == n { site - (n - 1) * stride } else { site + stride };
                let down = if c == 0 { site + (n - 1) * stride } else { site - stride };
                f.push(up as u32);
                b.push(down as u32);
            }
            fwd.push(f);
            bwd.push(b);
        }
        Neighbors { fwd, bwd }
    }
}

/// Forward and backward neighbor index along each axis.
#[derive(Debug, Clone)]
pub struct Neighbors {
    pub fwd: Vec<Vec<u32>>,
    pub bwd: Vec<Vec<u32>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(LatticeGrid::new(4, 8, 1.0).is_err());
        assert!(LatticeGrid::new(2, 12, 1.0).is_err());
        assert!(LatticeGrid::new(2, 8, 0.0).is_err());
    }

    #[test]
    fn index_roundtrip_and_wrap() {
        let g = LatticeGrid::new(3, 8, 8.0).unwrap();
        for site in [0, 1, 63, 200, 511] {
            assert_eq!(g.index(&g.coords(site)), site);
        }
        let corner = g.index(&[7, 7, 7]);
        assert_eq!(g.offset(corner, &[1, 1, 1]), 0);
        let nb = g.neighbors();
        assert_eq!(nb.fwd[2][corner] as usize, g.index(&[7, 7, 0]));
        assert_eq!(nb.bwd[0][0] as usize, g.index(&[7, 0, 0]));
    }

    #[test]
    fn periodic_distance_uses_min_image() {
        let g = LatticeGrid::new(2, 16, 32.0).unwrap();
        let a = g.index(&[0, 0]);
        let b = g.index(&[15, 3]);
        assert!((g.distance(a, b) - 2.0 * (1.0f64 + 9.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ball_offsets_counts() {
        let g = LatticeGrid::unit_spacing(2, 32).unwrap();
        assert_eq!(g.ball_offsets(1.0).len(), 5);
        assert_eq!(g.ball_offsets(0.5).len(), 1);
        let g1 = LatticeGrid::unit_spacing(1, 32).unwrap();
        assert_eq!(g1.ball_offsets(3.0).len(), 7);
    }
}
