//! Stationary Gaussian fields on the torus and the log-normal coefficient `a = exp(G)`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::grid::LatticeGrid;
use crate::rng::{stream_rng, streams};

/// Default relative tolerance on negative Fourier eigenvalues.
pub const DEFAULT_PSD_TOL: f64 = 1e-8;

/// Lattice images summed per axis (each side) when periodizing a covariance.
pub const PERIODIZATION_IMAGES: i64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceFamily {
    /// `A exp(-|x|^2 / (2 l^2))`
    GaussianKernel,
    /// `A exp(-|x| / l)`
    ExponentialKernel,
    /// `A (1 - 3r/2l + r^3/2l^3)` for `r < l`, zero beyond.
    SphericalCutoff,
}

impl std::str::FromStr for CovarianceFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_kernel" | "gaussian" => Ok(Self::GaussianKernel),
            "exponential_kernel" | "exponential" => Ok(Self::ExponentialKernel),
            "spherical_cutoff" | "spherical" => Ok(Self::SphericalCutoff),
            other => Err(Error::Config(format!("unknown covariance family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub family: CovarianceFamily,
    /// Equals `C(0)`.
    pub amplitude: f64,
    pub corr_length: f64,
    /// Declared Hölder exponent; metadata only.
    pub holder_gamma: f64,
}

impl CovarianceSpec {
    pub fn new(family: CovarianceFamily, amplitude: f64, corr_length: f64) -> Result<Self> {
        let spec = Self { family, amplitude, corr_length, holder_gamma: 0.45 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidCovariance(format!("amplitude {} must be > 0", self.amplitude)));
        }
        if !(self.corr_length > 0.0 && self.corr_length.is_finite()) {
            return Err(Error::InvalidCovariance(format!(
                "corr_length {} must be > 0",
                self.corr_length
            )));
        }
        if !(self.holder_gamma > 0.0 && self.holder_gamma < 0.5) {
            return Err(Error::InvalidCovariance(format!(
                "holder_gamma {} must lie in (0, 1/2)",
                self.holder_gamma
            )));
        }
        Ok(())
    }

    /// Whether the family is a convolution square `C0 * C0` with a decaying `C0`
    /// and a positive Fourier transform. Recorded, not verified numerically.
    pub fn has_convolution_root(&self) -> bool {
        match self.family {
            CovarianceFamily::GaussianKernel | CovarianceFamily::ExponentialKernel => true,
            CovarianceFamily::SphericalCutoff => false,
        }
    }

    pub fn eval_radial(&self, r: f64) -> f64 {
        let l = self.corr_length;
        match self.family {
            CovarianceFamily::GaussianKernel => self.amplitude * (-(r * r) / (2.0 * l * l)).exp(),
            CovarianceFamily::ExponentialKernel => self.amplitude * (-r / l).exp(),
            CovarianceFamily::SphericalCutoff => {
                if r >= l {
                    0.0
                } else {
                    let t = r / l;
                    self.amplitude * (1.0 - 1.5 * t + 0.5 * t * t * t)
                }
            }
        }
    }
}

/// `C(x)` for a point of any dimension.
pub fn covariance_eval(spec: &CovarianceSpec, x: &[f64]) -> f64 {
    spec.eval_radial(x.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Largest `(C(0) - C(x)) / |x|^(2 gamma)` over the given lags.
pub fn holder_constant(spec: &CovarianceSpec, lags: &[f64]) -> f64 {
    lags.iter()
        .filter(|&&r| r > 0.0)
        .map(|&r| (spec.amplitude - spec.eval_radial(r)) / r.powf(2.0 * spec.holder_gamma))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub seed: Option<u64>,
    pub method: String,
    pub parent_hash: Option<String>,
}

/// Scalar or vector values on a periodic lattice, laid out as `values[site * components + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    pub grid: LatticeGrid,
    pub components: usize,
    pub values: Vec<f64>,
    pub meta: FieldMeta,
}

impl LatticeField {
    pub fn new(grid: LatticeGrid, components: usize, values: Vec<f64>) -> Result<Self> {
        if components == 0 || values.len() != grid.sites() * components {
            return Err(Error::Shape(format!(
                "{} values for {} sites x {} components",
                values.len(),
                grid.sites(),
                components
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { grid, components, values, meta: FieldMeta::default() })
    }

    pub fn scalar(grid: LatticeGrid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, 1, values)
    }

    pub fn constant(grid: LatticeGrid, components: usize, value: f64) -> Self {
        Self {
            grid,
            components,
            values: vec![value; grid.sites() * components],
            meta: FieldMeta::default(),
        }
    }

    pub fn zeros(grid: LatticeGrid, components: usize) -> Self {
        Self::constant(grid, components, 0.0)
    }

    pub fn with_meta(mut self, meta: FieldMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn get(&self, site: usize, component: usize) -> f64 {
        self.values[site * self.components + component]
    }

    /// One component as a contiguous scalar array.
    pub fn component(&self, component: usize) -> Vec<f64> {
        self.values.iter().skip(component).step_by(self.components).copied().collect()
    }

    pub fn mean(&self, component: usize) -> f64 {
        self.values.iter().skip(component).step_by(self.components).sum::<f64>() / self.grid.sites() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn require_scalar(&self) -> Result<()> {
        if self.components != 1 {
            return Err(Error::Shape(format!("expected scalar field, got {} components", self.components)));
        }
        Ok(())
    }

    /// Write the flat binary container: magic, header, little-endian f64 payload.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.grid.dim() as u32).to_le_bytes())?;
        w.write_all(&(self.grid.n_per_side() as u32).to_le_bytes())?;
        w.write_all(&self.grid.side_length().to_le_bytes())?;
        w.write_all(&(self.components as u32).to_le_bytes())?;
        w.write_all(&[self.meta.seed.is_some() as u8])?;
        w.write_all(&self.meta.seed.unwrap_or(0).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Shape("not a lattice field container".into()));
        }
        let dim = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let side = f64::from_le_bytes(read_array(&mut r)?);
        let components = read_u32(&mut r)? as usize;
        let [has_seed] = read_array::<1, _>(&mut r)?;
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let grid = LatticeGrid::new(dim, n, side)?;
        let mut values = Vec::with_capacity(grid.sites() * components);
        for _ in 0..grid.sites() * components {
            values.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        let mut field = Self::new(grid, components, values)?;
        field.meta.seed = (has_seed != 0).then_some(seed);
        field.meta.method = "container".into();
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_binary(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// CSV with one row per site: index, coordinates, component values.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["site".to_string()];
        header.extend((0..self.grid.dim()).map(|a| format!("x{a}")));
        header.extend((0..self.components).map(|c| format!("c{c}")));
        out.write_record(&header)?;
        let h = self.grid.spacing();
        for site in 0..self.grid.sites() {
            let coords = self.grid.coords(site);
            let mut row = vec![site.to_string()];
            row.extend((0..self.grid.dim()).map(|a| format!("{}", coords[a] as f64 * h)));
            row.extend((0..self.components).map(|c| format!("{:e}", self.get(site, c))));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"LNHFIELD";

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

/// Spectral sampler for one (grid, covariance) pair; reusable across replicas.
pub struct GaussianSampler {
    grid: LatticeGrid,
    fft: FftNd,
    sqrt_spectrum: Vec<f64>,
    spec: CovarianceSpec,
}

impl GaussianSampler {
    pub fn new(grid: &LatticeGrid, spec: &CovarianceSpec, psd_tol: f64) -> Result<Self> {
        spec.validate()?;
        let fft = FftNd::new(grid);
        let eig = periodized_spectrum(grid, spec, &fft);
        let sqrt_spectrum = sqrt_spectrum(grid, &eig, psd_tol)?;
        Ok(Self { grid: *grid, fft, sqrt_spectrum, spec: *spec })
    }

    pub fn grid(&self) -> &LatticeGrid {
        &self.grid
    }

    pub fn spec(&self) -> &CovarianceSpec {
        &self.spec
    }

    /// Draw `G = F^-1 (sqrt(lambda) F xi)` with `xi` real white noise.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> LatticeField {
        let mut data: Vec<Complex64> = (0..self.grid.sites())
            .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
            .collect();
        self.fft.forward(&mut data);
        for (v, s) in data.iter_mut().zip(&self.sqrt_spectrum) {
            *v *= *s;
        }
        let values = self.fft.inverse_real(data);
        LatticeField {
            grid: self.grid,
            components: 1,
            values,
            meta: FieldMeta { seed: None, method: "spectral".into(), parent_hash: None },
        }
    }

    /// Field for replica `replica` of master seed `seed`.
    pub fn sample_replica(&self, seed: u64, replica: u64) -> LatticeField {
        let mut rng = stream_rng(seed, replica, streams::GAUSSIAN_FIELD);
        let mut g = self.sample(&mut rng);
        g.meta.seed = Some(seed);
        g
    }
}

/// Square roots of the eigenvalues, clipping negatives no larger than `psd_tol * max`.
fn sqrt_spectrum(grid: &LatticeGrid, eig: &[f64], psd_tol: f64) -> Result<Vec<f64>> {
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let (worst, min) = eig
        .iter()
        .enumerate()
        .fold((0, f64::MAX), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    if min < -psd_tol * max {
        let c = grid.coords(worst);
        return Err(Error::SpectrumNotPsd { mode: c[..grid.dim()].to_vec(), value: min, max });
    }
    Ok(eig.iter().map(|&v| v.max(0.0).sqrt()).collect())
}

/// Fourier eigenvalues of the covariance periodized over `PERIODIZATION_IMAGES` images per side.
fn periodized_spectrum(grid: &LatticeGrid, spec: &CovarianceSpec, fft: &FftNd) -> Vec<f64> {
    let d = grid.dim();
    let h = grid.spacing();
    let l = grid.side_length();
    let m = PERIODIZATION_IMAGES;
    let images: Vec<[i64; 3]> = {
        let range = |active: bool| if active { -m..=m } else { 0..=0 };
        let mut v = Vec::new();
        for i in range(true) {
            for j in range(d > 1) {
                for k in range(d > 2) {
                    v.push([i, j, k]);
                }
            }
        }
        v
    };
    let c: Vec<f64> = (0..grid.sites())
        .map(|site| {
            let coords = grid.coords(site);
            let mut base = [0.0; 3];
            for a in 0..d {
                base[a] = grid.min_image(coords[a] as i64) as f64 * h;
            }
            images
                .iter()
                .map(|img| {
                    let mut r2 = 0.0;
                    for a in 0..d {
                        let x = base[a] + img[a] as f64 * l;
                        r2 += x * x;
                    }
                    spec.eval_radial(r2.sqrt())
                })
                .sum()
        })
        .collect();
    fft.forward_real(&c).into_iter().map(|z| z.re).collect()
}

/// Draw one field; deterministic in `(grid, spec, seed)`.
pub fn sample_gaussian_field(grid: &LatticeGrid, spec: &CovarianceSpec, seed: u64) -> Result<LatticeField> {
    Ok(GaussianSampler::new(grid, spec, DEFAULT_PSD_TOL)?.sample_replica(seed, 0))
}

pub fn exp_field(g: &LatticeField) -> Result<LatticeField> {
    g.require_scalar()?;
    let mut a = g.clone();
    a.values.iter_mut().for_each(|v| *v = v.exp());
    a.meta.method = format!("exp({})", g.meta.method);
    Ok(a)
}

/// `a_M = min(max(a, 1/M), M)`.
pub fn truncate_coefficient(a: &LatticeField, m: f64) -> Result<LatticeField> {
    if !(m >= 1.0) {
        return Err(Error::BadTruncation(m));
    }
    a.require_scalar()?;
    let mut out = a.clone();
    out.values.iter_mut().for_each(|v| *v = v.clamp(1.0 / m, m));
    Ok(out)
}

/// Fraction of sites modified by truncation at level `m`.
pub fn clamped_fraction(a: &LatticeField, m: f64) -> f64 {
    let hits = a.values.iter().filter(|&&v| v > m || v < 1.0 / m).count();
    hits as f64 / a.values.len() as f64
}
