//! Video dictionary construction: k-means over pooled frame features.
//!
//! The dictionary is the model's visual-commonsense store — each cluster
//! center stands in for one recurring visual concept across the corpus.
//! It is fitted once, persisted, and consumed read-only by the encoder
//! (unless joint training is switched on).
//!
//! Dictionary file layout (little-endian):
//!   magic "VCRNDICT" | u32 version=1 | u32 M | u32 d
//!   | u64 seed | f64 final objective | M*d f32 row-major

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::files::{
    check_magic, check_version, expect_eof, read_f32_payload, read_f64, read_u32, read_u64,
    write_f32_payload, write_f64, write_u32, write_u64,
};
use crate::corpus::Video;
use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Tensor};

pub const DICT_MAGIC: &[u8; 8] = b"VCRNDICT";
pub const DICT_VERSION: u32 = 1;

/// How initial centers are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Seeding {
    /// k-means++: D^2-weighted sampling driven by the fit seed.
    PlusPlus,
    /// Deterministic maximin seeding pinned to data values, so the fit is
    /// invariant to pool row order.
    ValueBased,
}

#[derive(Clone, Debug)]
pub struct KmeansOptions {
    pub max_iter: usize,
    /// Stop when the largest center shift falls below this.
    pub tol: f64,
    pub seed: u64,
    pub seeding: Seeding,
    /// Optionally l2-normalize pool rows before clustering.
    pub l2_normalize: bool,
}

impl Default for KmeansOptions {
    fn default() -> KmeansOptions {
        KmeansOptions { max_iter: 100, tol: 1e-4, seed: 0, seeding: Seeding::PlusPlus, l2_normalize: false }
    }
}

/// Fit metadata kept alongside the centers.
#[derive(Clone, Debug, Default)]
pub struct FitMeta {
    pub iterations: usize,
    pub objective: f64,
    pub seed: u64,
    /// Objective after each Lloyd iteration; empty for loaded dictionaries.
    pub objective_history: Vec<f64>,
}

/// M cluster centers over frame features, plus fit metadata.
#[derive(Clone, Debug)]
pub struct VideoDictionary {
    pub centers: Tensor,
    pub meta: FitMeta,
}

impl VideoDictionary {
    pub fn num_centers(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }
}

/// Row-stack the frame features of all videos, in corpus order.
pub fn pool_frames(videos: &[Video]) -> Result<Tensor> {
    let first = videos
        .first()
        .ok_or_else(|| Error::Config("cannot pool an empty video list".to_string()))?;
    let d = first.feature_dim();
    let total: usize = videos.iter().map(Video::num_frames).sum();
    let mut data = Vec::with_capacity(total * d);
    for video in videos {
        if video.feature_dim() != d {
            return Err(Error::Config(format!(
                "video '{}' has feature dim {}, expected {}",
                video.id,
                video.feature_dim(),
                d
            )));
        }
        data.extend_from_slice(video.features.data());
    }
    Tensor::from_vec(total, d, data)
}

fn nearest_row(x: &[f64], centers: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centers.rows() {
        let dist = sq_dist(x, centers.row(j));
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

/// Index of the center nearest to `x` (squared Euclidean distance, ties
/// broken by the lowest index).
pub fn nearest_center(x: &[f64], dict: &VideoDictionary) -> Result<usize> {
    if x.len() != dict.dim() {
        return Err(Error::Dimension(format!(
            "query has dim {}, dictionary has {}",
            x.len(),
            dict.dim()
        )));
    }
    Ok(nearest_row(x, &dict.centers).0)
}

fn assign_all(pool: &Tensor, centers: &Tensor) -> (Vec<usize>, f64) {
    let mut assignment = Vec::with_capacity(pool.rows());
    let mut objective = 0.0;
    for r in 0..pool.rows() {
        let (j, dist) = nearest_row(pool.row(r), centers);
        assignment.push(j);
        objective += dist;
    }
    (assignment, objective)
}

/// Smaller-by-value row ordering, used only for deterministic tie-breaks.
fn row_less(a: &[f64], b: &[f64]) -> bool {
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x != y {
            return x < y;
        }
    }
    false
}

fn seed_plus_plus(pool: &Tensor, m: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = pool.rows();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(m);
    centers.push(pool.row(rng.gen_range(0..n)).to_vec());
    let mut dist_sq: Vec<f64> = (0..n).map(|r| sq_dist(pool.row(r), &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = dist_sq.iter().sum();
        let next = if total <= 0.0 {
            // All points coincide with a chosen center; any row works.
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (r, &dsq) in dist_sq.iter().enumerate() {
                target -= dsq;
                if target <= 0.0 {
                    chosen = r;
                    break;
                }
            }
            chosen
        };
        centers.push(pool.row(next).to_vec());
        for r in 0..n {
            let d = sq_dist(pool.row(r), centers.last().unwrap());
            if d < dist_sq[r] {
                dist_sq[r] = d;
            }
        }
    }
    Tensor::from_rows(&centers).expect("k-means++ rows are uniform")
}

/// Deterministic seeding that depends only on the multiset of rows: start
/// at the row nearest the pool mean, then repeatedly take the row farthest
/// from the chosen set. Ties go to the smaller row by value.
fn seed_value_based(pool: &Tensor, m: usize) -> Tensor {
    let n = pool.rows();
    let d = pool.cols();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (acc, &v) in mean.iter_mut().zip(pool.row(r).iter()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }

    let mut first = 0;
    let mut first_d = f64::INFINITY;
    for r in 0..n {
        let dist = sq_dist(pool.row(r), &mean);
        if dist < first_d || (dist == first_d && row_less(pool.row(r), pool.row(first))) {
            first = r;
            first_d = dist;
        }
    }

    let mut centers: Vec<Vec<f64>> = vec![pool.row(first).to_vec()];
    let mut dist_sq: Vec<f64> = (0..n).map(|r| sq_dist(pool.row(r), &centers[0])).collect();
    while centers.len() < m {
        let mut far = 0;
        let mut far_d = -1.0;
        for r in 0..n {
            if dist_sq[r] > far_d
                || (dist_sq[r] == far_d && row_less(pool.row(r), pool.row(far)))
            {
                far = r;
                far_d = dist_sq[r];
            }
        }
        centers.push(pool.row(far).to_vec());
        for r in 0..n {
            let dnew = sq_dist(pool.row(r), centers.last().unwrap());
            if dnew < dist_sq[r] {
                dist_sq[r] = dnew;
            }
        }
    }
    Tensor::from_rows(&centers).expect("maximin rows are uniform")
}

/// Lloyd's algorithm over the pooled frames.
///
/// Empty clusters are repaired by re-seeding the center onto the pool
/// point currently farthest from its own center. The per-iteration
/// objective (sum of squared distances to the nearest center) is recorded
/// and asserted non-increasing.
pub fn kmeans_fit(pool: &Tensor, m: usize, opts: &KmeansOptions) -> Result<VideoDictionary> {
    if m < 1 {
        return Err(Error::Config("k-means needs at least one center".to_string()));
    }
    if pool.rows() < m {
        return Err(Error::Config(format!(
            "k-means with M={} centers needs at least that many pool rows, got {}",
            m,
            pool.rows()
        )));
    }
    let pool_norm;
    let pool = if opts.l2_normalize {
        let mut p = pool.clone();
        for r in 0..p.rows() {
            let norm = p.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                let cols = p.cols();
                for c in 0..cols {
                    p.set(r, c, p.get(r, c) / norm);
                }
            }
        }
        pool_norm = p;
        &pool_norm
    } else {
        pool
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centers = match opts.seeding {
        Seeding::PlusPlus => seed_plus_plus(pool, m, &mut rng),
        Seeding::ValueBased => seed_value_based(pool, m),
    };

    let (mut assignment, mut objective) = assign_all(pool, &centers);
    let mut history = vec![objective];
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        iterations += 1;

        // Update step: means of assigned rows.
        let d = pool.cols();
        let mut sums = vec![vec![0.0; d]; m];
        let mut counts = vec![0usize; m];
        for (r, &j) in assignment.iter().enumerate() {
            counts[j] += 1;
            for (acc, &v) in sums[j].iter_mut().zip(pool.row(r).iter()) {
                *acc += v;
            }
        }
        let mut new_centers = centers.clone();
        for j in 0..m {
            if counts[j] == 0 {
                continue;
            }
            for c in 0..d {
                new_centers.set(j, c, sums[j][c] / counts[j] as f64);
            }
        }

        // Repair empty clusters: grab the point farthest from its center.
        let empties: Vec<usize> = (0..m).filter(|&j| counts[j] == 0).collect();
        if !empties.is_empty() {
            let mut taken = vec![false; pool.rows()];
            for &j in &empties {
                let mut far = None;
                let mut far_d = -1.0;
                for r in 0..pool.rows() {
                    if taken[r] {
                        continue;
                    }
                    let dist = sq_dist(pool.row(r), new_centers.row(assignment[r]));
                    if dist > far_d {
                        far = Some(r);
                        far_d = dist;
                    }
                }
                let r = far.expect("pool has at least M rows");
                taken[r] = true;
                for c in 0..d {
                    new_centers.set(j, c, pool.get(r, c));
                }
            }
        }

        let shift = (0..m)
            .map(|j| sq_dist(centers.row(j), new_centers.row(j)).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;

        let (new_assignment, new_objective) = assign_all(pool, &centers);
        debug_assert!(
            new_objective <= objective * (1.0 + 1e-12) + 1e-12,
            "k-means objective increased: {objective} -> {new_objective}"
        );
        let converged = new_assignment == assignment || shift < opts.tol;
        assignment = new_assignment;
        objective = new_objective;
        history.push(objective);
        if converged {
            break;
        }
    }

    Ok(VideoDictionary {
        centers,
        meta: FitMeta {
            iterations,
            objective,
            seed: opts.seed,
            objective_history: history,
        },
    })
}

pub fn save_dictionary(dict: &VideoDictionary, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DICT_MAGIC)?;
    write_u32(&mut w, DICT_VERSION)?;
    write_u32(&mut w, dict.num_centers() as u32)?;
    write_u32(&mut w, dict.dim() as u32)?;
    write_u64(&mut w, dict.meta.seed)?;
    write_f64(&mut w, dict.meta.objective)?;
    write_f32_payload(&mut w, dict.centers.data())?;
    w.flush()?;
    Ok(())
}

pub fn load_dictionary(path: &Path) -> Result<VideoDictionary> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, DICT_MAGIC)?;
    check_version(&mut r, DICT_VERSION)?;
    let m = read_u32(&mut r, "center count")? as usize;
    let d = read_u32(&mut r, "center dim")? as usize;
    let seed = read_u64(&mut r, "fit seed")?;
    let objective = read_f64(&mut r, "final objective")?;
    let values = read_f32_payload(&mut r, m * d, "center payload")?;
    expect_eof(&mut r, "dictionary")?;
    let centers = Tensor::from_vec(m, d, values)?;
    if !centers.is_finite() {
        return Err(Error::Numeric("dictionary centers contain non-finite values".into()));
    }
    Ok(VideoDictionary {
        centers,
        meta: FitMeta { iterations: 0, objective, seed, objective_history: Vec::new() },
    })
}
