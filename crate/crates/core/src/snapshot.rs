//! Binary snapshots of updater state for resume and audit.
//!
//! All integers and floats are little-endian; floats are IEEE-754 binary64
//! stored bit-exactly.
//!
//! | bytes      | field                                         |
//! |------------|-----------------------------------------------|
//! | 8          | magic `SMCSNAP1`                              |
//! | 4 (u32)    | model-name length `L`                         |
//! | L          | model name, UTF-8                             |
//! | 8 (u64)    | particle count `N`                            |
//! | 8 (u64)    | parameter count `D`                           |
//! | 32         | random-stream seed                            |
//! | 8 (u64)    | random-stream id                              |
//! | 16 (u128)  | random-stream word position                   |
//! | 8 (u64)    | resample count                                |
//! | 8 (f64)    | initial ESS                                   |
//! | 8 (f64)    | minimum observed ESS                          |
//! | 8·N        | weights                                       |
//! | 8·N·D      | locations, row-major (particle by particle)   |
//! | 8 (u64)    | record length `R` (= data count)              |
//! | 8·R        | normalization record                          |
//! | 8·R        | ESS trace                                     |
//!
//! The resampler configuration is not stored; supply it on restore.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::resample::ResamplerConfig;
use crate::rng::RandomStream;
use crate::smc::{ParticleFilter, RestoredCounters, Updater};

pub const MAGIC: &[u8; 8] = b"SMCSNAP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub model_name: String,
    pub filter: ParticleFilter,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub n_resamples: usize,
    pub n_ess_initial: f64,
    pub min_ess_observed: f64,
    pub normalization_record: Vec<f64>,
    pub ess_trace: Vec<f64>,
}

impl Snapshot {
    pub fn capture(u: &Updater) -> Self {
        let rng = u.rng();
        Snapshot {
            model_name: u.model().name(),
            filter: u.filter().clone(),
            rng_seed: rng.get_seed(),
            rng_stream: rng.get_stream(),
            rng_word_pos: rng.get_word_pos(),
            n_resamples: u.n_resamples(),
            n_ess_initial: u.n_ess_initial(),
            min_ess_observed: u.min_ess_observed(),
            normalization_record: u.normalization_record().to_vec(),
            ess_trace: u.ess_trace().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.filter.n_particles();
        let d = self.filter.n_modelparams();
        let mut out = Vec::with_capacity(128 + 8 * n * (d + 1) + 16 * self.normalization_record.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.model_name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.model_name.as_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_stream.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&(self.n_resamples as u64).to_le_bytes());
        out.extend_from_slice(&self.n_ess_initial.to_le_bytes());
        out.extend_from_slice(&self.min_ess_observed.to_le_bytes());
        for w in self.filter.weights() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let locs = self.filter.locations();
        for k in 0..n {
            for j in 0..d {
                out.extend_from_slice(&locs[(k, j)].to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.normalization_record.len() as u64).to_le_bytes());
        for v in self.normalization_record.iter().chain(&self.ess_trace) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.bad("not a particle-filter snapshot (bad magic)"));
        }
        let name_len = r.u32()? as usize;
        let model_name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.bad("model name is not UTF-8"))?
            .to_string();
        let n = r.len()?;
        let d = r.len()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng_stream = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n_resamples = r.len()?;
        let n_ess_initial = r.f64()?;
        let min_ess_observed = r.f64()?;
        let weights = r.f64s(n)?;
        let flat = r.f64s(n.checked_mul(d).ok_or_else(|| r.bad("particle table too large"))?)?;
        let records = r.len()?;
        let normalization_record = r.f64s(records)?;
        let ess_trace = r.f64s(records)?;
        if r.pos != bytes.len() {
            return Err(r.bad("trailing bytes after snapshot"));
        }
        let filter = ParticleFilter::new(weights, DMatrix::from_row_slice(n, d, &flat))?;
        Ok(Snapshot {
            model_name,
            filter,
            rng_seed,
            rng_stream,
            rng_word_pos,
            n_resamples,
            n_ess_initial,
            min_ess_observed,
            normalization_record,
            ess_trace,
        })
    }

    /// Rebuilds an updater. `model` must be the chain the snapshot was taken
    /// from; its name is checked.
    pub fn restore(self, model: Arc<dyn Model>, resampler: ResamplerConfig) -> Result<Updater> {
        if model.name() != self.model_name {
            return Err(Error::config(format!(
                "snapshot was taken with model `{}`, not `{}`",
                self.model_name,
                model.name()
            )));
        }
        let mut rng = RandomStream::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        Updater::restore(
            model,
            self.filter,
            resampler,
            rng,
            RestoredCounters {
                n_ess_initial: self.n_ess_initial,
                min_ess_observed: self.min_ess_observed,
                normalization_record: self.normalization_record,
                ess_trace: self.ess_trace,
                n_resamples: self.n_resamples,
            },
        )
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bad(&self, detail: &str) -> Error {
        Error::Ingestion { row: self.pos, detail: format!("snapshot byte {}: {detail}", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| self.bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.bad("length overflows"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.bad("length overflows"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Distribution;
    use crate::model::Experiment;
    use crate::models::PrecessionModel;
    use crate::rng::stream_from_seed;

    #[test]
    fn round_trip_resumes_identically() {
        let model: Arc<dyn Model> = Arc::new(PrecessionModel::new());
        let prior = Distribution::uniform(vec![[0.0, 1.0]]).unwrap();
        let mut u = Updater::new(model.clone(), 500, &prior, ResamplerConfig::default(), stream_from_seed(3)).unwrap();
        for k in 0..20 {
            let e = Experiment::new().with_real("t", 1.2f64.powi(k));
            u.update((k % 2) as usize, &e).unwrap();
        }
        let bytes = Snapshot::capture(&u).to_bytes();
        let mut resumed = Snapshot::from_bytes(&bytes).unwrap().restore(model, ResamplerConfig::default()).unwrap();
        assert_eq!(Snapshot::capture(&resumed).to_bytes(), bytes);
        for k in 20..40 {
            let e = Experiment::new().with_real("t", 1.2f64.powi(k));
            u.update((k % 3 == 0) as usize, &e).unwrap();
            resumed.update((k % 3 == 0) as usize, &e).unwrap();
        }
        assert_eq!(u.filter(), resumed.filter());
        assert_eq!(u.log_evidence(), resumed.log_evidence());
    }

    #[test]
    fn corrupt_input_is_ingestion_error() {
        assert!(matches!(Snapshot::from_bytes(b"nonsense"), Err(Error::Ingestion { .. })));
        let model: Arc<dyn Model> = Arc::new(PrecessionModel::new());
        let prior = Distribution::uniform(vec![[0.0, 1.0]]).unwrap();
        let u = Updater::new(model, 10, &prior, ResamplerConfig::default(), stream_from_seed(3)).unwrap();
        let bytes = Snapshot::capture(&u).to_bytes();
        assert!(Snapshot::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
