//! Kernel-based temporal segmentation: shot boundaries from frame features
//! by dynamic programming over within-segment kernel scatter, with a
//! model-selection penalty on the segment count.

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum KtsError {
    #[error("kts: empty feature sequence")]
    EmptyInput,
    #[error("segment cost: empty range [{a}, {b})")]
    EmptyRange { a: usize, b: usize },
    #[error("kts: max_segments must be at least 1")]
    BadMaxSegments,
    #[error("kts: cannot split {frames} frames into {segments} non-empty segments")]
    TooManySegments { frames: usize, segments: usize },
    #[error("boundaries: {0}")]
    BadBoundaries(String),
}

/// Shot boundaries as 0-based half-open cuts `b_0 = 0 < b_1 < ... < b_P = M`;
/// shot i covers frames `[b_i, b_{i+1})`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShotBoundaries {
    cuts: Vec<usize>,
}

impl ShotBoundaries {
    pub fn new(cuts: Vec<usize>) -> Result<Self, KtsError> {
        if cuts.len() < 2 {
            return Err(KtsError::BadBoundaries(format!("need at least [0, M], got {cuts:?}")));
        }
        if cuts[0] != 0 {
            return Err(KtsError::BadBoundaries(format!("first cut must be 0, got {}", cuts[0])));
        }
        if !cuts.windows(2).all(|w| w[0] < w[1]) {
            return Err(KtsError::BadBoundaries(format!("cuts must be strictly increasing: {cuts:?}")));
        }
        Ok(ShotBoundaries { cuts })
    }

    /// One shot spanning all M frames.
    pub fn single(num_frames: usize) -> Result<Self, KtsError> {
        ShotBoundaries::new(vec![0, num_frames])
    }

    pub fn cuts(&self) -> &[usize] {
        &self.cuts
    }

    pub fn num_shots(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn num_frames(&self) -> usize {
        *self.cuts.last().unwrap()
    }

    /// Half-open frame range of shot i.
    pub fn shot_range(&self, i: usize) -> (usize, usize) {
        (self.cuts[i], self.cuts[i + 1])
    }

    pub fn shot_len(&self, i: usize) -> usize {
        self.cuts[i + 1] - self.cuts[i]
    }

    /// Shot index for every frame, length M.
    pub fn frame_shots(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_frames());
        for i in 0..self.num_shots() {
            out.extend(std::iter::repeat_n(i, self.shot_len(i)));
        }
        out
    }

    /// Convert to the 1-based closed convention, where the list starts with
    /// the index of the first frame (1) and each later entry is the 1-based
    /// index of a shot's last frame.
    pub fn to_one_based_closed(&self) -> Vec<usize> {
        let mut out = vec![1];
        out.extend_from_slice(&self.cuts[1..]);
        out
    }

    pub fn from_one_based_closed(bounds: &[usize]) -> Result<Self, KtsError> {
        if bounds.first() != Some(&1) {
            return Err(KtsError::BadBoundaries(format!(
                "1-based boundaries must start with 1, got {bounds:?}"
            )));
        }
        let mut cuts = vec![0];
        cuts.extend_from_slice(&bounds[1..]);
        ShotBoundaries::new(cuts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    Linear,
    Rbf { sigma: f64 },
}

#[derive(Clone, Debug)]
pub struct KtsConfig {
    pub max_segments: usize,
    pub penalty_coefficient: f64,
    pub kernel: Kernel,
}

impl Default for KtsConfig {
    fn default() -> Self {
        KtsConfig { max_segments: 40, penalty_coefficient: 1.0, kernel: Kernel::Linear }
    }
}

/// K[i, j] = <f_i, f_j> for the linear kernel, or
/// exp(-|f_i - f_j|^2 / (2 sigma^2)) for the RBF kernel.
pub fn gram_matrix(features: &Tensor, kernel: &Kernel) -> Tensor {
    let m = features.rows();
    let d = features.cols();
    let f = features.data();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = match kernel {
                Kernel::Linear => {
                    let mut dot = 0.0;
                    for t in 0..d {
                        dot += f[i * d + t] * f[j * d + t];
                    }
                    dot
                }
                Kernel::Rbf { sigma } => {
                    let mut dist = 0.0;
                    for t in 0..d {
                        let diff = f[i * d + t] - f[j * d + t];
                        dist += diff * diff;
                    }
                    (-dist / (2.0 * sigma * sigma)).exp()
                }
            };
            out[i * m + j] = v;
            out[j * m + i] = v;
        }
    }
    Tensor::new(m, m, out).expect("gram matrix of finite features")
}

/// Prefix sums over a gram matrix so any segment's scatter is O(1):
/// cost(a, b) = sum_{t in [a,b)} K[t,t] - (1/(b-a)) sum_{t,u in [a,b)} K[t,u].
pub struct ScatterTable {
    m: usize,
    diag: Vec<f64>,
    block: Vec<f64>,
}

impl ScatterTable {
    pub fn new(gram: &Tensor) -> Self {
        let m = gram.rows();
        let k = gram.data();
        let mut diag = vec![0.0; m + 1];
        for i in 0..m {
            diag[i + 1] = diag[i] + k[i * m + i];
        }
        // block[i*(m+1)+j] = sum over t<i, u<j of K[t,u]
        let w = m + 1;
        let mut block = vec![0.0; w * w];
        for i in 0..m {
            for j in 0..m {
                block[(i + 1) * w + (j + 1)] =
                    k[i * m + j] + block[i * w + (j + 1)] + block[(i + 1) * w + j] - block[i * w + j];
            }
        }
        ScatterTable { m, diag, block }
    }

    pub fn cost(&self, a: usize, b: usize) -> Result<f64, KtsError> {
        if a >= b || b > self.m {
            return Err(KtsError::EmptyRange { a, b });
        }
        let w = self.m + 1;
        let within = self.block[b * w + b] - self.block[a * w + b] - self.block[b * w + a] + self.block[a * w + a];
        Ok((self.diag[b] - self.diag[a]) - within / (b - a) as f64)
    }
}

struct DpTables {
    m: usize,
    // cost[k][a]: best cost of splitting frames [a, M) into k segments
    cost: Vec<Vec<f64>>,
    // next[k][a]: end of the first segment in that optimum
    next: Vec<Vec<usize>>,
}

impl DpTables {
    /// Ties broken toward the earliest cut: candidates are scanned in
    /// ascending cut order and only strict improvements are taken.
    fn build(table: &ScatterTable, max_segments: usize) -> Result<DpTables, KtsError> {
        let m = table.m;
        let kmax = max_segments.min(m);
        let mut cost = vec![vec![f64::INFINITY; m + 1]; kmax + 1];
        let mut next = vec![vec![0usize; m + 1]; kmax + 1];
        for a in 0..m {
            cost[1][a] = table.cost(a, m)?;
            next[1][a] = m;
        }
        for k in 2..=kmax {
            for a in 0..=(m - k) {
                let mut best = f64::INFINITY;
                let mut best_t = 0;
                for t in (a + 1)..=(m - (k - 1)) {
                    let c = table.cost(a, t)? + cost[k - 1][t];
                    if c < best {
                        best = c;
                        best_t = t;
                    }
                }
                cost[k][a] = best;
                next[k][a] = best_t;
            }
        }
        Ok(DpTables { m, cost, next })
    }

    fn optimum(&self, segments: usize) -> Result<(ShotBoundaries, f64), KtsError> {
        if segments == 0 || segments >= self.cost.len() {
            return Err(KtsError::TooManySegments { frames: self.m, segments });
        }
        let total = self.cost[segments][0];
        let mut cuts = vec![0];
        let mut at = 0;
        for k in (1..=segments).rev() {
            at = self.next[k][at];
            cuts.push(at);
        }
        Ok((ShotBoundaries::new(cuts)?, total))
    }
}

/// Best segmentation with exactly `segments` segments, plus its DP cost.
pub fn kts_fixed(features: &Tensor, segments: usize, kernel: &Kernel) -> Result<(ShotBoundaries, f64), KtsError> {
    let m = features.rows();
    if m == 0 {
        return Err(KtsError::EmptyInput);
    }
    if segments == 0 || segments > m {
        return Err(KtsError::TooManySegments { frames: m, segments });
    }
    let table = ScatterTable::new(&gram_matrix(features, kernel));
    DpTables::build(&table, segments)?.optimum(segments)
}

/// Full KTS: pick the segment count m minimizing
/// `C(m) + penalty * m * (ln(M/m) + 1)` over 1..=max_segments, then return
/// the argmin cuts. Ties prefer fewer segments and earlier cuts.
pub fn kts(features: &Tensor, cfg: &KtsConfig) -> Result<ShotBoundaries, KtsError> {
    let m_frames = features.rows();
    if m_frames == 0 {
        return Err(KtsError::EmptyInput);
    }
    if cfg.max_segments == 0 {
        return Err(KtsError::BadMaxSegments);
    }
    let table = ScatterTable::new(&gram_matrix(features, &cfg.kernel));
    let kmax = cfg.max_segments.min(m_frames);
    let dp = DpTables::build(&table, kmax)?;
    let mut best_m = 1;
    let mut best_total = f64::INFINITY;
    for seg in 1..=kmax {
        let penalty = cfg.penalty_coefficient * seg as f64 * ((m_frames as f64 / seg as f64).ln() + 1.0);
        let total = dp.cost[seg][0] + penalty;
        if total < best_total {
            best_total = total;
            best_m = seg;
        }
    }
    Ok(dp.optimum(best_m)?.0)
}
