//! Adversarial sequence mining: flatten per-task gradients on the frozen
//! base into sketches, cache all pairwise cosines once, then exhaustively
//! enumerate every n-subset and rank by mean pairwise cosine (lowest =
//! most conflicting).

use crate::error::{Result, SliceError};
use crate::gradients::{accumulate_gradients, GradientSource};
use crate::linalg::kahan_sum;
use crate::model::{AdapterSet, DenseModel};
use crate::seeds;
use crate::tasks::{SplitSampler, Task};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Flattened calibration gradient of one task on the frozen base model.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradientSketch {
    pub task_id: String,
    pub g: Vec<f64>,
    pub norm: f64,
}

impl TaskGradientSketch {
    pub fn new(task_id: String, g: Vec<f64>) -> Result<Self> {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(SliceError::Degenerate(format!(
                "sketch for '{task_id}' has non-finite entries"
            )));
        }
        let norm = kahan_sum(g.iter().map(|v| v * v)).sqrt();
        if norm <= 0.0 {
            return Err(SliceError::Degenerate(format!(
                "sketch for '{task_id}' has zero gradient"
            )));
        }
        Ok(TaskGradientSketch { task_id, g, norm })
    }
}

/// Accumulate gradients on the frozen base (no adapters) and flatten the
/// per-layer matrices in ascending layer order.
pub fn sketch_task_gradient(
    model: &DenseModel,
    task: &Task,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TaskGradientSketch> {
    let mut sampler =
        SplitSampler::with_replacement(&task.train, seeds::derive(seed, "sketch", 0));
    let set = accumulate_gradients(
        model,
        &AdapterSet::new(),
        &mut sampler,
        steps,
        batch_size,
        GradientSource::CurrentTask,
    )?;
    TaskGradientSketch::new(task.id.clone(), set.flatten())
}

pub fn cosine(a: &TaskGradientSketch, b: &TaskGradientSketch) -> Result<f64> {
    if a.g.len() != b.g.len() {
        return Err(SliceError::DimensionMismatch {
            left_rows: a.g.len(),
            left_cols: 1,
            right_rows: b.g.len(),
            right_cols: 1,
        });
    }
    let inner = kahan_sum(a.g.iter().zip(&b.g).map(|(x, y)| x * y));
    Ok(inner / (a.norm * b.norm))
}

/// Upper-triangular cache of all pairwise cosines for a pool.
#[derive(Debug, Clone)]
pub struct PairScoreCache {
    ids: Vec<String>,
    scores: Vec<f64>,
}

impl PairScoreCache {
    pub fn pool_size(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.ids.len());
        let m = self.ids.len();
        i * (2 * m - i - 1) / 2 + (j - i - 1)
    }

    /// Cosine between pool members `i` and `j` (symmetric, i != j).
    pub fn score(&self, i: usize, j: usize) -> f64 {
        if i < j {
            self.scores[self.index(i, j)]
        } else {
            self.scores[self.index(j, i)]
        }
    }
}

/// Score all (M choose 2) pairs once.
pub fn build_pair_cache(sketches: &[TaskGradientSketch]) -> Result<PairScoreCache> {
    if sketches.len() < 2 {
        return Err(SliceError::InvalidConfig(
            "pair cache needs at least two sketches".into(),
        ));
    }
    let mut ids = Vec::with_capacity(sketches.len());
    for s in sketches {
        if ids.contains(&s.task_id) {
            return Err(SliceError::DuplicateTaskId(s.task_id.clone()));
        }
        ids.push(s.task_id.clone());
    }
    let m = sketches.len();
    let mut scores = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            scores.push(cosine(&sketches[i], &sketches[j])?);
        }
    }
    Ok(PairScoreCache { ids, scores })
}

/// One mined subset with its mean pairwise cosine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceCandidate {
    pub task_ids: Vec<String>,
    pub phi_bar: f64,
}

#[derive(Debug, Clone)]
pub struct MineOutcome {
    /// The `top_k` lowest-phi_bar subsets, ties broken by lexicographic
    /// task-id order.
    pub candidates: Vec<SequenceCandidate>,
    pub subsets_visited: u64,
}

/// C(m, n) without overflow for the pool sizes we care about.
pub fn binomial(m: usize, n: usize) -> u128 {
    if n > m {
        return 0;
    }
    let n = n.min(m - n);
    let mut acc: u128 = 1;
    for i in 0..n {
        acc = acc * (m - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exhaustively enumerate all n-subsets of the pool, computing phi_bar by
/// summing cached pair scores, and return the best `top_k`.
pub fn mine(cache: &PairScoreCache, n: usize, top_k: usize, budget: u64) -> Result<MineOutcome> {
    let m = cache.pool_size();
    if n < 2 || n > m {
        return Err(SliceError::InvalidConfig(format!(
            "subset size {n} out of range for pool of {m}"
        )));
    }
    if top_k == 0 {
        return Err(SliceError::InvalidConfig("top_k must be positive".into()));
    }
    let count = binomial(m, n);
    if count > budget as u128 {
        return Err(SliceError::BudgetExceeded {
            pool: m,
            subset: n,
            count,
            budget,
        });
    }
    let pairs = (n * (n - 1) / 2) as f64;

    let compare = |a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)| -> std::cmp::Ordering {
        a.0.total_cmp(&b.0).then_with(|| {
            let ids_a: Vec<&String> = a.1.iter().map(|&i| &cache.ids()[i]).collect();
            let ids_b: Vec<&String> = b.1.iter().map(|&i| &cache.ids()[i]).collect();
            ids_a.cmp(&ids_b)
        })
    };

    // Kept sorted ascending; the last element is the weakest of the best-k.
    let mut best: Vec<(f64, Vec<usize>)> = Vec::with_capacity(top_k + 1);
    let mut subset: Vec<usize> = (0..n).collect();
    let mut visited: u64 = 0;
    loop {
        visited += 1;
        let mut sum = 0.0;
        for (a_pos, &a) in subset.iter().enumerate() {
            for &b in &subset[a_pos + 1..] {
                sum += cache.score(a, b);
            }
        }
        let entry = (sum / pairs, subset.clone());
        if best.len() < top_k || compare(&entry, best.last().expect("non-empty")).is_lt() {
            let pos = best
                .binary_search_by(|probe| compare(probe, &entry))
                .unwrap_or_else(|p| p);
            best.insert(pos, entry);
            best.truncate(top_k);
        }
        if !next_combination(&mut subset, m) {
            break;
        }
    }
    debug_assert_eq!(visited as u128, count);
    let candidates = best
        .into_iter()
        .map(|(phi_bar, subset)| SequenceCandidate {
            task_ids: subset.iter().map(|&i| cache.ids()[i].clone()).collect(),
            phi_bar,
        })
        .collect();
    Ok(MineOutcome {
        candidates,
        subsets_visited: visited,
    })
}

/// Advance to the next lexicographic n-combination of `0..m`; false when
/// the current combination is the last one.
fn next_combination(subset: &mut [usize], m: usize) -> bool {
    let n = subset.len();
    for i in (0..n).rev() {
        if subset[i] != i + m - n {
            subset[i] += 1;
            for k in (i + 1)..n {
                subset[k] = subset[k - 1] + 1;
            }
            return true;
        }
    }
    false
}

const SKETCH_MAGIC: &[u8; 4] = b"SLSK";
const SKETCH_VERSION: u32 = 1;

/// Write a sketch as an id header plus little-endian doubles.
pub fn save_sketch(path: &Path, sketch: &TaskGradientSketch) -> Result<()> {
    let display = path.display().to_string();
    let mut buf = Vec::with_capacity(16 + sketch.task_id.len() + sketch.g.len() * 8);
    buf.extend_from_slice(SKETCH_MAGIC);
    buf.extend_from_slice(&SKETCH_VERSION.to_le_bytes());
    let id = sketch.task_id.as_bytes();
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&(sketch.g.len() as u64).to_le_bytes());
    for v in &sketch.g {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| SliceError::io(&display, e))?;
    file.write_all(&buf).map_err(|e| SliceError::io(&display, e))
}

pub fn load_sketch(path: &Path) -> Result<TaskGradientSketch> {
    let display = path.display().to_string();
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| SliceError::io(&display, e))?
        .read_to_end(&mut raw)
        .map_err(|e| SliceError::io(&display, e))?;
    let need = |have: bool| -> Result<()> {
        if have {
            Ok(())
        } else {
            Err(SliceError::malformed(&display, "unexpected end of file"))
        }
    };
    need(raw.len() >= 12)?;
    if &raw[..4] != SKETCH_MAGIC {
        return Err(SliceError::malformed(&display, "bad magic"));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != SKETCH_VERSION {
        return Err(SliceError::malformed(
            &display,
            format!("unsupported version {version}"),
        ));
    }
    let id_len = u32::from_le_bytes(raw[8..12].try_into().unwrap()) as usize;
    need(raw.len() >= 12 + id_len + 8)?;
    let task_id = String::from_utf8(raw[12..12 + id_len].to_vec())
        .map_err(|_| SliceError::malformed(&display, "id is not utf-8"))?;
    let dim_off = 12 + id_len;
    let dim = u64::from_le_bytes(raw[dim_off..dim_off + 8].try_into().unwrap()) as usize;
    let data_off = dim_off + 8;
    need(raw.len() == data_off + dim * 8)?;
    let g = raw[data_off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    TaskGradientSketch::new(task_id, g)
}
