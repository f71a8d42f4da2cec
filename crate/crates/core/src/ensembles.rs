//! Seeded random ensembles and Monte-Carlo HiRIP estimation.
//!
//! Every generator is a pure function of its dimensions and a 64-bit seed.
//! Seeds for sub-draws are derived by hashing a base seed together with a
//! tuple of tags, so any trial can be regenerated without replaying others.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier_sparse::{BlockShape, HiSparseVector, SparsityLevels};
use crate::operators::{BlindConvOp, Codebook, DemixOp, MeasurementOperator};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a base seed and a key tuple into an independent stream seed.
pub fn derive_seed(base: u64, key: &[u64]) -> u64 {
    key.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tags that separate the streams of one instance.
mod tag {
    pub const SPREAD: u64 = 1;
    pub const CODEBOOK: u64 = 2;
    pub const FILTER: u64 = 3;
    pub const MESSAGE: u64 = 4;
    pub const MIXING: u64 = 5;
}

/// Sorted uniform `k`-subset of `0..n`.
fn uniform_subset<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut idx = index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn nonzero_gaussian<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v != 0.0 {
            return v;
        }
    }
}

fn gaussian_matrix(rows: usize, cols: usize, variance: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, variance.sqrt()).expect("variance is positive");
    let entries: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
    DMatrix::from_row_slice(rows, cols, &entries)
}

/// `U` with i.i.d. `N(0, 1/μ)` entries.
pub fn gen_spread(mu: usize, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    if mu == 0 || m == 0 {
        return Err(Error::Config(
            "spreading matrix dimensions must be positive".to_string(),
        ));
    }
    Ok(gaussian_matrix(mu, m, 1.0 / mu as f64, seed))
}

/// A `σ`-sparse message with uniformly placed Rademacher entries.
pub fn gen_message(n: usize, sigma: usize, seed: u64) -> Result<Vec<f64>> {
    if sigma == 0 || sigma > n {
        return Err(Error::InvalidLevels(format!(
            "sigma = {sigma} must lie in 1..={n}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut b = vec![0.0; n];
    for j in uniform_subset(&mut rng, n, sigma) {
        b[j] = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    Ok(b)
}

/// An `s`-sparse filter with uniformly placed standard Gaussian entries.
pub fn gen_filter(mu: usize, s: usize, seed: u64) -> Result<Vec<f64>> {
    if s == 0 || s > mu {
        return Err(Error::InvalidLevels(format!(
            "s = {s} must lie in 1..={mu}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut h = vec![0.0; mu];
    for k in uniform_subset(&mut rng, mu, s) {
        h[k] = nonzero_gaussian(&mut rng);
    }
    Ok(h)
}

/// Mixing matrix `D` with i.i.d. `N(0, 1/M)` entries and a uniform active-user set.
pub fn gen_mixing(
    antennas: usize,
    users: usize,
    active: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if antennas == 0 || users == 0 {
        return Err(Error::Config(
            "mixing dimensions must be positive".to_string(),
        ));
    }
    if active == 0 || active > users {
        return Err(Error::InvalidLevels(format!(
            "S = {active} must lie in 1..={users}"
        )));
    }
    let d = gaussian_matrix(antennas, users, 1.0 / antennas as f64, seed);
    let mut rng = rng_from_seed(derive_seed(seed, &[tag::MIXING]));
    Ok((d, uniform_subset(&mut rng, users, active)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    /// `A = id`, so `m = n`.
    #[default]
    Identity,
    /// `A` with i.i.d. `N(0, 1/m)` entries.
    Gaussian,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    #[default]
    Gaussian,
    /// `D = I`; needs `M = N`.
    Identity,
}

/// Dimensions, sparsity levels and seed of one random problem instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub mu: usize,
    pub m: usize,
    pub n: usize,
    #[serde(rename = "N")]
    pub users: usize,
    #[serde(rename = "M")]
    pub antennas: usize,
    pub s: usize,
    pub sigma: usize,
    #[serde(rename = "S")]
    pub active_users: usize,
    pub seed: u64,
    #[serde(default)]
    pub codebook: CodebookKind,
    #[serde(default)]
    pub mixing: MixingKind,
}

impl EnsembleSpec {
    /// Single-user spec with `A = id`.
    pub fn single(n: usize, mu: usize, s: usize, sigma: usize, seed: u64) -> Self {
        Self {
            mu,
            m: n,
            n,
            users: 1,
            antennas: 1,
            s,
            sigma,
            active_users: 1,
            seed,
            codebook: CodebookKind::Identity,
            mixing: MixingKind::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.mu, self.m, self.n, self.users, self.antennas].contains(&0) {
            return Err(Error::Config(format!(
                "dimensions must be positive: {self:?}"
            )));
        }
        if self.codebook == CodebookKind::Identity && self.m != self.n {
            return Err(Error::Config("identity codebook needs m = n".to_string()));
        }
        if self.mixing == MixingKind::Identity && self.users != self.antennas {
            return Err(Error::Config("identity mixing needs M = N".to_string()));
        }
        self.levels().validate(&self.shape())
    }

    pub fn shape(&self) -> BlockShape {
        BlockShape::three_level(self.users, self.mu, self.n)
    }

    pub fn levels(&self) -> SparsityLevels {
        SparsityLevels::three_level(self.active_users, self.s, self.sigma)
    }

    fn user_operator(&self, user: usize) -> Result<BlindConvOp> {
        let u = gen_spread(
            self.mu,
            self.m,
            derive_seed(self.seed, &[tag::SPREAD, user as u64]),
        )?;
        let codebook = match self.codebook {
            CodebookKind::Identity => Codebook::Identity(self.n),
            CodebookKind::Gaussian => Codebook::Dense(gaussian_matrix(
                self.m,
                self.n,
                1.0 / self.m as f64,
                derive_seed(self.seed, &[tag::CODEBOOK, user as u64]),
            )),
        };
        BlindConvOp::new(u, codebook)
    }

    fn user_signal(&self, user: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = gen_filter(
            self.mu,
            self.s,
            derive_seed(self.seed, &[tag::FILTER, user as u64]),
        )?;
        let b = gen_message(
            self.n,
            self.sigma,
            derive_seed(self.seed, &[tag::MESSAGE, user as u64]),
        )?;
        Ok((h, b))
    }
}

/// A single-user blind-deconvolution instance with noiseless measurements.
#[derive(Clone, Debug)]
pub struct BlindConvInstance {
    pub op: BlindConvOp,
    pub filter: Vec<f64>,
    pub message: Vec<f64>,
    pub truth: HiSparseVector,
    pub measurements: Vec<f64>,
}

impl BlindConvInstance {
    /// Draws user 0 of `spec`; `users`, `antennas` and `active_users` are ignored.
    pub fn draw(spec: &EnsembleSpec) -> Result<Self> {
        let single = EnsembleSpec {
            users: 1,
            antennas: 1,
            active_users: 1,
            mixing: MixingKind::Identity,
            ..*spec
        };
        single.validate()?;
        let op = single.user_operator(0)?;
        let (filter, message) = single.user_signal(0)?;
        let truth = HiSparseVector::from_factors(&filter, &message)?;
        let measurements = op.apply(&truth)?;
        Ok(Self {
            op,
            filter,
            message,
            truth,
            measurements,
        })
    }
}

/// A multi-user demixing instance with noiseless measurements.
#[derive(Clone, Debug)]
pub struct DemixInstance {
    pub op: DemixOp,
    pub active: Vec<usize>,
    /// Stacked `N × μ × n` ground truth; inactive users are zero.
    pub truth: HiSparseVector,
    pub measurements: Vec<f64>,
}

impl DemixInstance {
    pub fn draw(spec: &EnsembleSpec) -> Result<Self> {
        spec.validate()?;
        let (random_d, active) = gen_mixing(
            spec.antennas,
            spec.users,
            spec.active_users,
            derive_seed(spec.seed, &[tag::MIXING]),
        )?;
        let mixing = match spec.mixing {
            MixingKind::Gaussian => random_d,
            MixingKind::Identity => DMatrix::identity(spec.antennas, spec.users),
        };
        let users = (0..spec.users)
            .map(|i| spec.user_operator(i))
            .collect::<Result<Vec<_>>>()?;
        let inner = BlockShape::two_level(spec.mu, spec.n);
        let mut blocks = Vec::with_capacity(spec.users);
        for i in 0..spec.users {
            if active.binary_search(&i).is_ok() {
                let (h, b) = spec.user_signal(i)?;
                blocks.push(HiSparseVector::from_factors(&h, &b)?);
            } else {
                blocks.push(HiSparseVector::zeros(inner));
            }
        }
        let truth = HiSparseVector::stack_users(&blocks)?;
        let op = DemixOp::new(mixing, users)?;
        let measurements = op.apply(&truth)?;
        Ok(Self {
            op,
            active,
            truth,
            measurements,
        })
    }
}

/// Monte-Carlo lower bound on a hierarchical RIP constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RipEstimate {
    /// `max |‖A u‖² − 1|` over the sampled unit vectors.
    pub delta_lower: f64,
    pub trials: usize,
    pub witness_trial: usize,
    pub max_witness: HiSparseVector,
}

/// Uniform support at every level, Gaussian values, unit norm.
fn random_sparse_unit(shape: BlockShape, levels: &SparsityLevels, seed: u64) -> HiSparseVector {
    let mut rng = rng_from_seed(seed);
    loop {
        let mut data = vec![0.0; shape.len()];
        let users = uniform_subset(&mut rng, shape.users, levels.users.unwrap_or(1));
        for &user in &users {
            for block in uniform_subset(&mut rng, shape.blocks, levels.s) {
                for entry in uniform_subset(&mut rng, shape.block_len, levels.sigma) {
                    data[shape.index(user, block, entry)] = StandardNormal.sample(&mut rng);
                }
            }
        }
        let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            data.iter_mut().for_each(|v| *v /= norm);
            return HiSparseVector::new(shape, data).expect("sampled data is finite");
        }
    }
}

fn isometry_defect(op: &dyn MeasurementOperator, u: &HiSparseVector, out: &mut [f64]) -> f64 {
    op.apply_into(u.data(), out);
    let energy: f64 = out.iter().map(|v| v * v).sum();
    (energy - u.norm_sq()).abs()
}

/// Samples `trials` random unit `levels`-sparse vectors and keeps the worst defect.
///
/// Trial `t` draws from `derive_seed(seed, [t])`, so a longer run extends a
/// shorter one and the estimate never decreases with `trials`.
pub fn estimate_hirip(
    op: &dyn MeasurementOperator,
    levels: &SparsityLevels,
    trials: usize,
    seed: u64,
) -> Result<RipEstimate> {
    let shape = op.signal_shape();
    levels.validate(&shape)?;
    if trials == 0 {
        return Err(Error::Config(
            "HiRIP estimation needs at least one trial".to_string(),
        ));
    }
    let (delta_lower, witness_trial) = (0..trials)
        .into_par_iter()
        .map_init(
            || vec![0.0; op.measurement_len()],
            |out, t| {
                let u = random_sparse_unit(shape, levels, derive_seed(seed, &[t as u64]));
                (isometry_defect(op, &u, out), t)
            },
        )
        .reduce(
            || (f64::NEG_INFINITY, usize::MAX),
            |a, b| {
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            },
        );
    let max_witness = random_sparse_unit(shape, levels, derive_seed(seed, &[witness_trial as u64]));
    Ok(RipEstimate {
        delta_lower,
        trials,
        witness_trial,
        max_witness,
    })
}

/// Re-measures a witness: `|‖A u‖² − ‖u‖²|`.
pub fn witness_defect(op: &dyn MeasurementOperator, u: &HiSparseVector) -> f64 {
    let mut out = vec![0.0; op.measurement_len()];
    isometry_defect(op, u, &mut out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn spread_is_reproducible() {
        let a = gen_spread(5, 4, 11).unwrap();
        assert_eq!(a, gen_spread(5, 4, 11).unwrap());
        assert_ne!(a, gen_spread(5, 4, 12).unwrap());
    }

    #[test]
    fn message_and_filter_cardinalities() {
        for seed in 0..50 {
            let b = gen_message(10, 3, seed).unwrap();
            assert_eq!(b.iter().filter(|v| **v != 0.0).count(), 3);
            assert_eq!(b.iter().map(|v| v * v).sum::<f64>(), 3.0);
            let h = gen_filter(12, 4, seed).unwrap();
            assert_eq!(h.iter().filter(|v| **v != 0.0).count(), 4);
        }
        assert!(gen_message(10, 10, 3)
            .unwrap()
            .iter()
            .all(|v| v.abs() == 1.0));
        assert!(gen_filter(6, 6, 3).unwrap().iter().all(|v| *v != 0.0));
        assert!(gen_message(3, 4, 0).is_err());
        assert!(gen_filter(3, 4, 0).is_err());
    }

    #[test]
    fn mixing_active_set() {
        let (d, active) = gen_mixing(4, 6, 2, 9).unwrap();
        assert_eq!((d.nrows(), d.ncols()), (4, 6));
        assert_eq!(active.len(), 2);
        assert_eq!(gen_mixing(4, 6, 2, 9).unwrap(), (d, active));
        assert!(gen_mixing(4, 6, 7, 9).is_err());
    }

    #[test]
    fn single_user_demix_matches_blind_instance() {
        let spec = EnsembleSpec::single(8, 16, 2, 3, 42);
        let single = BlindConvInstance::draw(&spec).unwrap();
        let demix = DemixInstance::draw(&spec).unwrap();
        assert_eq!(single.measurements, demix.measurements);
        assert_eq!(single.truth.data(), demix.truth.data());
    }

    #[test]
    fn spec_validation() {
        let mut spec = EnsembleSpec::single(8, 16, 2, 3, 1);
        spec.mixing = MixingKind::Identity;
        spec.antennas = 2;
        assert!(spec.validate().is_err());
        let mut spec = EnsembleSpec::single(8, 16, 2, 3, 1);
        spec.m = 4;
        assert!(spec.validate().is_err());
        spec.codebook = CodebookKind::Gaussian;
        assert!(spec.validate().is_ok());
        assert!(EnsembleSpec::single(8, 16, 17, 3, 1).validate().is_err());
    }
}
