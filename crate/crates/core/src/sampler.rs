//! Exact sampling from a fitted density.
//!
//! A cell is chosen with probability `q_j / Σ q`, then a uniform point `w`
//! of the unit simplex is accepted with probability
//! `exp(⟨w, z_j⟩ − max(0, max_l z_{j,l}))` and mapped into the cell.
//!
//! Streams come from `ChaCha8Rng::seed_from_u64`, which is portable across
//! platforms. Sharded sampling derives one seed per shard with
//! [`derive_seed`] and concatenates shards in order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::mle::LogConcaveDensity;

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed of sub-stream `stream` of `seed` (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A uniform point of `T_d` from the spacings of `d` sorted uniforms.
pub fn uniform_simplex<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut u: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
    u.sort_by(f64::total_cmp);
    let mut prev = 0.0;
    for v in u.iter_mut() {
        let cur = *v;
        *v = cur - prev;
        prev = cur;
    }
    u
}

/// `log max_{w ∈ T_d} exp⟨w, z⟩`, attained at a vertex of `T_d`.
pub fn log_rejection_bound(z: &[f64]) -> f64 {
    z.iter().fold(0.0f64, |m, &v| m.max(v))
}

/// One accepted draw.
#[derive(Clone, Debug)]
pub struct Draw {
    pub point: Vec<f64>,
    /// `log f̂` at the point.
    pub log_density: f64,
    pub cell: usize,
    /// Proposals used, including the accepted one.
    pub proposals: usize,
}

/// Per-model sampling tables.
pub struct Sampler<'a> {
    model: &'a LogConcaveDensity,
    cells: WeightedAliasIndex<f64>,
    bounds: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a LogConcaveDensity) -> Result<Self> {
        let cells = WeightedAliasIndex::new(model.masses().to_vec())
            .map_err(|e| Error::InvalidInput(format!("cell masses cannot drive sampling: {e}")))?;
        let bounds = model.tent().edge_differences().iter().map(|z| log_rejection_bound(z)).collect();
        Ok(Self { model, cells, bounds })
    }

    pub fn model(&self) -> &LogConcaveDensity {
        self.model
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Draw {
        let tent = self.model.tent();
        let d = self.model.dim();
        // The cell is kept across rejections; redrawing it would weight
        // cells by their acceptance rates.
        let j = self.cells.sample(rng);
        let z = &tent.edge_differences()[j];
        let mut proposals = 0;
        loop {
            proposals += 1;
            let w = uniform_simplex(rng, d);
            let exponent = dot(&w, z);
            let u: f64 = rng.random();
            if u < (exponent - self.bounds[j]).exp() {
                let s = &tent.triangulation().simplices[j];
                return Draw {
                    point: s.map(&w),
                    log_density: tent.heights()[s.vertices[0]] + exponent,
                    cell: j,
                    proposals,
                };
            }
        }
    }
}

/// Draws with their bookkeeping.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub points: Vec<Vec<f64>>,
    pub log_densities: Vec<f64>,
    pub seed: u64,
    /// Accepted draws over proposals.
    pub acceptance_rate: f64,
    /// Accepted draws per cell.
    pub simplex_counts: Vec<usize>,
}

fn collect(sampler: &Sampler<'_>, count: usize, seed: u64) -> SampleBatch {
    let mut rng = rng_from_seed(seed);
    let mut points = Vec::with_capacity(count);
    let mut log_densities = Vec::with_capacity(count);
    let mut simplex_counts = vec![0; sampler.model.masses().len()];
    let mut proposals = 0;
    for _ in 0..count {
        let draw = sampler.draw(&mut rng);
        proposals += draw.proposals;
        simplex_counts[draw.cell] += 1;
        points.push(draw.point);
        log_densities.push(draw.log_density);
    }
    SampleBatch {
        points,
        log_densities,
        seed,
        acceptance_rate: count as f64 / proposals.max(1) as f64,
        simplex_counts,
    }
}

/// `count` exact draws from `model` on one stream.
pub fn sample(model: &LogConcaveDensity, count: usize, seed: u64) -> Result<SampleBatch> {
    if count == 0 {
        return Err(Error::InvalidInput("sample count must be positive".into()));
    }
    let sampler = Sampler::new(model)?;
    Ok(collect(&sampler, count, seed))
}

/// `count` draws split over `shards` independent streams processed in
/// parallel. The output depends on `shards` but not on the thread count.
pub fn sample_sharded(model: &LogConcaveDensity, count: usize, seed: u64, shards: usize) -> Result<SampleBatch> {
    if count == 0 || shards == 0 {
        return Err(Error::InvalidInput("sample count and shard count must be positive".into()));
    }
    let sampler = Sampler::new(model)?;
    let per = count.div_ceil(shards);
    let parts: Vec<SampleBatch> = (0..shards)
        .into_par_iter()
        .map(|k| {
            let take = per.min(count.saturating_sub(k * per));
            collect(&sampler, take, derive_seed(seed, k as u64))
        })
        .collect();
    let mut out = SampleBatch {
        points: Vec::with_capacity(count),
        log_densities: Vec::with_capacity(count),
        seed,
        acceptance_rate: 0.0,
        simplex_counts: vec![0; model.masses().len()],
    };
    let mut proposals = 0.0;
    for p in parts {
        let n = p.points.len();
        if n > 0 {
            proposals += n as f64 / p.acceptance_rate;
        }
        out.points.extend(p.points);
        out.log_densities.extend(p.log_densities);
        out.simplex_counts.iter_mut().zip(&p.simplex_counts).for_each(|(a, b)| *a += b);
    }
    out.acceptance_rate = count as f64 / proposals;
    Ok(out)
}
