//! Oblivious environments.
//!
//! Every generator materializes the whole stream, labels included, from its
//! spec and seed before any policy runs. Policies only ever see `x` and the
//! labels of queried rounds; `domain_id`, `true_mean` and the ground truth
//! are for the harness.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_squared};
use crate::nonlinear::HypothesisTable;

/// How domain blocks are laid out in time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainOrdering {
    /// Domains arrive one after another.
    #[default]
    Sequential,
    /// Round-robin over the domains that still have rounds left.
    Interleaved,
    /// Uniformly random permutation of the sequential schedule.
    Shuffled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainEntry {
    /// Subspace dimension `d_u`.
    pub dim: usize,
    /// Number of rounds `T_u`.
    pub duration: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub entries: Vec<DomainEntry>,
    #[serde(default)]
    pub ordering: DomainOrdering,
}

impl DomainSpec {
    pub fn new(entries: &[(usize, usize)], ordering: DomainOrdering) -> Result<Self> {
        let spec = Self {
            entries: entries
                .iter()
                .map(|&(dim, duration)| DomainEntry { dim, duration })
                .collect(),
            ordering,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Twenty domains of either `(d_u, T_u) = (6, 100)` or `(3, 50)` that fit
    /// orthogonally in `R^88`: nine of the first kind and eleven of the
    /// second (`Σ d_u = 87`), alternating while both remain.
    pub fn synthetic_twenty(ordering: DomainOrdering) -> Self {
        let mut entries = Vec::with_capacity(20);
        let (mut large, mut small) = (9, 11);
        while large + small > 0 {
            if large > 0 && (entries.len() % 2 == 0 || small == 0) {
                entries.push(DomainEntry { dim: 6, duration: 100 });
                large -= 1;
            } else {
                entries.push(DomainEntry { dim: 3, duration: 50 });
                small -= 1;
            }
        }
        Self { entries, ordering }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid("domain spec has no domains"));
        }
        for (u, e) in self.entries.iter().enumerate() {
            if e.dim == 0 || e.duration == 0 {
                return Err(Error::invalid(format!(
                    "domain {u} needs positive dimension and duration"
                )));
            }
            if e.dim > e.duration {
                return Err(Error::invalid(format!(
                    "domain {u} has d_u = {} > T_u = {}",
                    e.dim, e.duration
                )));
            }
        }
        Ok(())
    }

    pub fn total_rounds(&self) -> usize {
        self.entries.iter().map(|e| e.duration).sum()
    }

    pub fn total_dim(&self) -> usize {
        self.entries.iter().map(|e| e.dim).sum()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|e| (e.dim, e.duration)).collect()
    }

    /// Domain id of every round.
    pub fn schedule<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut ids: Vec<usize> = Vec::with_capacity(self.total_rounds());
        match self.ordering {
            DomainOrdering::Sequential | DomainOrdering::Shuffled => {
                for (u, e) in self.entries.iter().enumerate() {
                    ids.extend(std::iter::repeat_n(u, e.duration));
                }
                if self.ordering == DomainOrdering::Shuffled {
                    ids.shuffle(rng);
                }
            }
            DomainOrdering::Interleaved => {
                let mut left: Vec<usize> = self.entries.iter().map(|e| e.duration).collect();
                while ids.len() < self.total_rounds() {
                    for (u, l) in left.iter_mut().enumerate() {
                        if *l > 0 {
                            *l -= 1;
                            ids.push(u);
                        }
                    }
                }
            }
        }
        ids
    }
}

/// One round of a materialized stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRound {
    pub t: usize,
    pub x: Vec<f64>,
    pub domain_id: usize,
    /// `f*(x)`, when the environment knows it.
    pub true_mean: Option<f64>,
    /// The label the environment drew for this round.
    pub label: f64,
    /// Index into the support of a finite hypothesis class.
    pub support_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub theta_star: Option<Vec<f64>>,
    pub truth_index: Option<usize>,
    pub noise_eta: f64,
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_sphere<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vector(rng, n);
        let norm = norm_squared(&v).sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|c| c / norm).collect();
        }
    }
}

/// Orthonormal basis of `R^n` from the QR factor of a Gaussian matrix
/// (modified Gram–Schmidt). Returned as columns.
fn random_rotation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = gaussian_vector(rng, n);
        for q in &basis {
            let c = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
        }
        let norm = norm_squared(&v).sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|c| c / norm).collect());
        }
    }
    basis
}

/// Hidden-domain synthetic stream.
///
/// Domain `u` owns the coordinate block `[Σ_{v<u} d_v, Σ_{v≤u} d_v)` with
/// a random rotation inside it, so inputs of different domains are exactly
/// orthogonal. `x = V_u z` with `z` uniform on the unit sphere, `θ*` is
/// uniform on the unit sphere of `R^d` and `y = ⟨θ*, x⟩ + N(0, η²)`.
pub fn synthetic_stream(
    spec: &DomainSpec,
    ambient_dim: usize,
    eta: f64,
    seed: u64,
) -> Result<(GroundTruth, Vec<StreamRound>)> {
    spec.validate()?;
    if spec.total_dim() > ambient_dim {
        return Err(Error::invalid(format!(
            "domains need {} dimensions, ambient dimension is {ambient_dim}",
            spec.total_dim()
        )));
    }
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::invalid("noise level must be finite and non-negative"));
    }
    let mut rng = rng_for(seed);
    let theta = unit_sphere(&mut rng, ambient_dim);
    let mut offsets = Vec::with_capacity(spec.entries.len());
    let mut bases = Vec::with_capacity(spec.entries.len());
    let mut offset = 0;
    for e in &spec.entries {
        offsets.push(offset);
        bases.push(random_rotation(&mut rng, e.dim));
        offset += e.dim;
    }
    let schedule = spec.schedule(&mut rng);
    let rounds = schedule
        .into_iter()
        .enumerate()
        .map(|(t, u)| {
            let z = unit_sphere(&mut rng, spec.entries[u].dim);
            let mut x = vec![0.0; ambient_dim];
            for (zj, col) in z.iter().zip(&bases[u]) {
                for (i, c) in col.iter().enumerate() {
                    x[offsets[u] + i] += zj * c;
                }
            }
            let mean = dot(&theta, &x).clamp(-1.0, 1.0);
            let noise: f64 = rng.sample(StandardNormal);
            StreamRound {
                t,
                x,
                domain_id: u,
                true_mean: Some(mean),
                label: mean + eta * noise,
                support_id: None,
            }
        })
        .collect();
    Ok((
        GroundTruth {
            theta_star: Some(theta),
            truth_index: None,
            noise_eta: eta,
        },
        rounds,
    ))
}

/// Lengths of the `d` subblocks of a block of `T` rounds: `⌊T/d⌋` each,
/// with the last one taking the remainder.
pub fn subblock_lengths(dim: usize, duration: usize) -> Vec<usize> {
    if dim == 0 {
        return Vec::new();
    }
    let base = duration / dim;
    let mut lengths = vec![base; dim];
    lengths[dim - 1] += duration - base * dim;
    lengths
}

/// Adversarial stream for the budgeted lower bound.
///
/// Blocks arrive in order; block `u` is split into `d_u` subblocks and
/// subblock `(u, i)` repeats the basis vector of its own coordinate.
/// `θ*` has i.i.d. uniform coordinates and labels are Bernoulli(`θ*_{u,i}`).
/// The ordering field of `spec` is ignored.
pub fn lower_bound_stream(spec: &DomainSpec, seed: u64) -> Result<(GroundTruth, Vec<StreamRound>)> {
    spec.validate()?;
    let dim = spec.total_dim();
    let mut rng = rng_for(seed);
    let theta: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    let mut rounds = Vec::with_capacity(spec.total_rounds());
    let mut coord = 0;
    for (u, e) in spec.entries.iter().enumerate() {
        for len in subblock_lengths(e.dim, e.duration) {
            for _ in 0..len {
                let mut x = vec![0.0; dim];
                x[coord] = 1.0;
                let mean = theta[coord];
                let label = if rng.random::<f64>() < mean { 1.0 } else { 0.0 };
                rounds.push(StreamRound {
                    t: rounds.len(),
                    x,
                    domain_id: u,
                    true_mean: Some(mean),
                    label,
                    support_id: None,
                });
            }
            coord += 1;
        }
    }
    Ok((
        GroundTruth {
            theta_star: Some(theta),
            truth_index: None,
            // Bernoulli noise is sub-Gaussian with variance proxy 1/4.
            noise_eta: 0.5,
        },
        rounds,
    ))
}

/// Stream over the support of a finite hypothesis class.
///
/// Domain `u` owns support ids `[Σ_{v<u} d_v, Σ_{v≤u} d_v)` and draws one
/// uniformly each round. `x` is the one-hot encoding of the id, so linear
/// policies can run on the same stream. `y = f*(x) + N(0, η²)` with `f*`
/// the table's `truth_index`.
pub fn table_stream(
    spec: &DomainSpec,
    table: &HypothesisTable<f64>,
    eta: f64,
    seed: u64,
) -> Result<(GroundTruth, Vec<StreamRound>)> {
    spec.validate()?;
    table.validate()?;
    let n = table.support_size();
    if spec.total_dim() > n {
        return Err(Error::invalid(format!(
            "domains need {} support points, the class has {n}",
            spec.total_dim()
        )));
    }
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::invalid("noise level must be finite and non-negative"));
    }
    let truth = table
        .truth_index
        .ok_or_else(|| Error::invalid("hypothesis table has no truth_index"))?;
    let mut rng = rng_for(seed);
    let mut offsets = Vec::with_capacity(spec.entries.len());
    let mut offset = 0;
    for e in &spec.entries {
        offsets.push(offset);
        offset += e.dim;
    }
    let schedule = spec.schedule(&mut rng);
    let rounds = schedule
        .into_iter()
        .enumerate()
        .map(|(t, u)| {
            let id = offsets[u] + rng.random_range(0..spec.entries[u].dim);
            let mut x = vec![0.0; n];
            x[id] = 1.0;
            let mean = table.value(truth, id);
            let noise: f64 = rng.sample(StandardNormal);
            StreamRound {
                t,
                x,
                domain_id: u,
                true_mean: Some(mean),
                label: mean + eta * noise,
                support_id: Some(id),
            }
        })
        .collect();
    Ok((
        GroundTruth {
            theta_star: None,
            truth_index: Some(truth),
            noise_eta: eta,
        },
        rounds,
    ))
}

/// Rounds read back from a replay file.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    pub rounds: Vec<StreamRound>,
    pub dim: usize,
    /// Rows whose `x` had norm above one and were scaled to unit norm.
    pub rescaled_rows: usize,
}

impl Replay {
    /// True when every round carries `f*(x)`.
    pub fn has_true_mean(&self) -> bool {
        self.rounds.iter().all(|r| r.true_mean.is_some())
    }
}

const NA: &str = "NA";

/// Rows with `‖x‖ ≤ 1 + NORM_SLACK` are kept verbatim, so unit vectors
/// that round slightly above one survive a round trip bit for bit.
pub const NORM_SLACK: f64 = 1e-12;

/// Reads `t,domain_id[,true_mean],y,x_0,...,x_{d-1}`.
pub fn read_replay<R: Read>(reader: R) -> Result<Replay> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let header_err = |message: String| Error::Parse { line: 1, message };
    if names.len() < 3 || names[0] != "t" || names[1] != "domain_id" {
        return Err(header_err("header must start with `t,domain_id`".into()));
    }
    let has_mean = names[2] == "true_mean";
    let y_col = if has_mean { 3 } else { 2 };
    if names.get(y_col) != Some(&"y") {
        return Err(header_err("missing `y` column".into()));
    }
    let dim = names.len() - y_col - 1;
    if dim == 0 {
        return Err(header_err("no feature columns".into()));
    }
    for (j, name) in names[y_col + 1..].iter().enumerate() {
        if *name != format!("x_{j}") {
            return Err(header_err(format!("expected column `x_{j}`, found `{name}`")));
        }
    }

    let mut rounds: Vec<StreamRound> = Vec::new();
    let mut rescaled_rows = 0;
    for record in csv.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| Error::Parse { line, message };
        if record.len() != names.len() {
            return Err(err(format!(
                "expected {} fields, found {}",
                names.len(),
                record.len()
            )));
        }
        let field = |i: usize| record[i].trim();
        let float = |i: usize| -> Result<f64> {
            let v: f64 = field(i)
                .parse()
                .map_err(|_| err(format!("`{}` is not a number in column `{}`", field(i), names[i])))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value in column `{}`", names[i])));
            }
            Ok(v)
        };
        let t: usize = field(0)
            .parse()
            .map_err(|_| err(format!("`{}` is not a round index", field(0))))?;
        if let Some(prev) = rounds.last() {
            if t <= prev.t {
                return Err(err(format!("rows are not sorted by t ({t} after {})", prev.t)));
            }
        }
        let domain_id: usize = field(1)
            .parse()
            .map_err(|_| err(format!("`{}` is not a domain id", field(1))))?;
        let true_mean = if has_mean && field(2) != NA {
            let m = float(2)?;
            if m.abs() > 1.0 {
                return Err(err("true_mean must lie in [-1, 1]".into()));
            }
            Some(m)
        } else {
            None
        };
        let label = float(y_col)?;
        let mut x = (y_col + 1..names.len()).map(float).collect::<Result<Vec<f64>>>()?;
        let norm = norm_squared(&x).sqrt();
        if norm > 1.0 + NORM_SLACK {
            x.iter_mut().for_each(|v| *v /= norm);
            rescaled_rows += 1;
        }
        rounds.push(StreamRound {
            t,
            x,
            domain_id,
            true_mean,
            label,
            support_id: None,
        });
    }
    Ok(Replay {
        rounds,
        dim,
        rescaled_rows,
    })
}

pub fn replay_stream(path: impl AsRef<Path>) -> Result<Replay> {
    read_replay(std::fs::File::open(path)?)
}

/// Writes rounds in the replay format. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_replay<W: Write>(writer: W, rounds: &[StreamRound]) -> Result<()> {
    let dim = rounds.first().map_or(0, |r| r.x.len());
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string(), "domain_id".into(), "true_mean".into(), "y".into()];
    header.extend((0..dim).map(|j| format!("x_{j}")));
    csv.write_record(&header)?;
    for r in rounds {
        if r.x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.x.len(),
            });
        }
        let mut row = vec![
            r.t.to_string(),
            r.domain_id.to_string(),
            r.true_mean.map_or_else(|| NA.to_string(), |m| m.to_string()),
            r.label.to_string(),
        ];
        row.extend(r.x.iter().map(f64::to_string));
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Hex digest identifying a stream's inputs and labels bit for bit.
pub fn stream_hash(rounds: &[StreamRound]) -> String {
    let mut hasher = Sha256::new();
    for r in rounds {
        hasher.update((r.t as u64).to_le_bytes());
        hasher.update((r.domain_id as u64).to_le_bytes());
        hasher.update(r.label.to_bits().to_le_bytes());
        hasher.update(r.true_mean.map_or(u64::MAX, f64::to_bits).to_le_bytes());
        for v in &r.x {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}
