//! Diagonal Gaussian over weights, estimated online from an iterate stream.
//!
//! Minimising the forward KL from the sampled distribution to a diagonal
//! Gaussian is moment matching, so the sketch only has to track per-weight
//! running mean and sum of squared deviations.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{NetworkShape, ParamVector};
use crate::optim::NoiseSource;

/// Welford running moments for a vector-valued stream.
#[derive(Debug, Clone, PartialEq)]
pub struct WelfordAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WelfordAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn m2(&self) -> &[f64] {
        &self.m2
    }

    /// Number of parameter-sized arrays held, independent of `count`.
    pub const ARRAYS: usize = 2;

    pub fn push(&mut self, sample: &ParamVector) -> Result<()> {
        sample.check_len(self.len())?;
        if let Some(i) = sample.first_non_finite() {
            return Err(Error::Validation(format!("non-finite sample value at coordinate {i}")));
        }
        self.count += 1;
        let n = self.count as f64;
        for ((mean, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample.as_slice()) {
            let delta = x - *mean;
            *mean += delta / n;
            // (x - old mean) * (x - new mean) is never negative
            *m2 += delta * (x - *mean);
        }
        Ok(())
    }

    /// Bessel-corrected variance `M2 / (S - 1)`.
    pub fn finalize(&self) -> Result<GaussianPosterior> {
        if self.count < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                have: self.count as usize,
            });
        }
        let denom = (self.count - 1) as f64;
        Ok(GaussianPosterior {
            mu: self.mean.clone(),
            sigma2: self.m2.iter().map(|m| m / denom).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma2.len() {
            return Err(Error::LengthMismatch {
                expected: mu.len(),
                got: sigma2.len(),
            });
        }
        if mu.iter().any(|v| !v.is_finite()) || sigma2.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("posterior moments must be finite with sigma2 >= 0".into()));
        }
        Ok(Self { mu, sigma2 })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mean_params(&self) -> ParamVector {
        ParamVector::from_vec(self.mu.clone())
    }

    /// `w_i = mu_i + sigma_i * z_i`.
    pub fn sample(&self, noise: &mut NoiseSource) -> ParamVector {
        ParamVector::from_vec(
            self.mu
                .iter()
                .zip(&self.sigma2)
                .map(|(m, s2)| {
                    let z = noise.standard_normal();
                    if *s2 == 0.0 {
                        *m
                    } else {
                        m + s2.sqrt() * z
                    }
                })
                .collect(),
        )
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"GPOSTv01";

/// Posterior plus the network shape it belongs to.
///
/// Binary layout, little-endian: magic `GPOSTv01`, `u64` input dim, `u64`
/// hidden layer count, one `u64` per hidden width, `u64` output dim, `u64`
/// parameter count, then `mu` and `sigma2` as raw `f64` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSnapshot {
    pub shape: NetworkShape,
    pub posterior: GaussianPosterior,
}

impl PosteriorSnapshot {
    pub fn new(shape: NetworkShape, posterior: GaussianPosterior) -> Result<Self> {
        shape.validate()?;
        if posterior.len() != shape.param_count() {
            return Err(Error::LengthMismatch {
                expected: shape.param_count(),
                got: posterior.len(),
            });
        }
        Ok(Self { shape, posterior })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        let mut header = vec![self.shape.input_dim as u64, self.shape.hidden_dims.len() as u64];
        header.extend(self.shape.hidden_dims.iter().map(|&h| h as u64));
        header.push(self.shape.output_dim as u64);
        header.push(self.posterior.len() as u64);
        for h in header {
            out.write_all(&h.to_le_bytes())?;
        }
        for v in self.posterior.mu.iter().chain(&self.posterior.sigma2) {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let io = |e| Error::io("reading posterior snapshot", e);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Validation("not a posterior snapshot".into()));
        }
        let read_u64 = |input: &mut R| -> Result<usize> {
            let mut b = [0u8; 8];
            input.read_exact(&mut b).map_err(io)?;
            usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Validation("header value overflows".into()))
        };
        let input_dim = read_u64(&mut input)?;
        let layers = read_u64(&mut input)?;
        if layers > 1024 {
            return Err(Error::Validation(format!("implausible hidden layer count {layers}")));
        }
        let hidden = (0..layers).map(|_| read_u64(&mut input)).collect::<Result<Vec<_>>>()?;
        let output_dim = read_u64(&mut input)?;
        let shape = NetworkShape::new(input_dim, hidden, output_dim)?;
        let n = read_u64(&mut input)?;
        if n != shape.param_count() {
            return Err(Error::Consistency(format!(
                "snapshot holds {n} parameters, shape {shape} needs {}",
                shape.param_count()
            )));
        }
        let mut raw = vec![0u8; 16 * n];
        input.read_exact(&mut raw).map_err(io)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let (mu, sigma2) = values.split_at(n);
        Self::new(shape, GaussianPosterior::new(mu.to_vec(), sigma2.to_vec())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
